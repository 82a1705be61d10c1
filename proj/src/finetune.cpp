#include "lsemvae/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "lsemvae/fusion.hpp"
#include "lsemvae/train.hpp"

namespace lsemvae {

std::vector<std::string> resolve_leads(const std::string& spec) {
  if (spec == "limb6") return kLimbLeads;
  if (spec == "bipolar3") return {"I", "II", "III"};
  if (spec == "augmented3") return {"aVR", "aVL", "aVF"};
  if (spec == "all12") return kTwelveLeads;
  std::vector<std::string> out;
  std::stringstream in(spec);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError("empty lead name in '" + spec + "'");
    out.push_back(item.substr(b, e - b + 1));
  }
  if (out.empty()) throw ConfigError("empty lead list");
  std::vector<std::string> sorted = out;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("duplicate lead in '" + spec + "'");
  }
  return out;
}

void FinetuneConfig::validate() const {
  if (lead_subset.empty()) throw ConfigError("lead_subset must not be empty");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (fc_size < 1) throw ConfigError("fc_size must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (folds < 2) throw ConfigError("folds must be >= 2");
}

std::set<std::string> FinetuneModel::trainable() const {
  std::set<std::string> out;
  for (const auto& [name, t] : params.tensors) {
    if (!frozen.count(name)) out.insert(name);
  }
  return out;
}

Checkpoint FinetuneModel::checkpoint() const {
  Checkpoint c;
  c.metadata = config.to_metadata();
  c.metadata["kind"] = "finetune";
  std::string list;
  for (const auto& name : frozen) list += (list.empty() ? "" : ",") + name;
  c.metadata["finetune.frozen"] = list;
  c.params = params;
  return c;
}

FinetuneModel FinetuneModel::from_checkpoint(const Checkpoint& ckpt) {
  FinetuneModel m;
  m.config = ModelConfig::from_metadata(ckpt.metadata);
  if (!m.config.with_classifier) throw CorruptFile("checkpoint has no classifier head");
  validate_layout(ckpt.params, init_params<float>(m.config, 0));
  m.params = ckpt.params;
  const auto it = ckpt.metadata.find("finetune.frozen");
  if (it != ckpt.metadata.end()) {
    std::stringstream in(it->second);
    std::string name;
    while (std::getline(in, name, ',')) {
      if (!name.empty()) m.frozen.insert(name);
    }
  }
  return m;
}

FinetuneModel build_finetune_model(const ModelConfig& pretrained_config, const ParamStore<float>& pretrained,
                                   const FinetuneConfig& config) {
  config.validate();
  for (const auto& lead : config.lead_subset) {
    if (std::find(pretrained_config.leads.begin(), pretrained_config.leads.end(), lead) ==
        pretrained_config.leads.end()) {
      throw LeadNotFound("checkpoint has no encoder for lead " + lead);
    }
  }
  FinetuneModel out;
  out.config = pretrained_config;
  out.config.leads = config.lead_subset;
  out.config.fc_size = config.fc_size;
  out.config.with_decoder = false;
  out.config.with_classifier = true;
  out.config.validate();
  out.params = init_params<float>(out.config, CounterRng(config.seed).fork(7).next_u64());
  for (auto& [name, t] : out.params.tensors) {
    if (name.starts_with(names::kClassifierPrefix)) continue;
    if (!pretrained.contains(name)) throw LeadNotFound("checkpoint is missing parameter " + name);
    const auto& src = pretrained.at(name);
    if (src.shape != t.shape) throw ShapeError("shape of " + name + " differs from the model configuration");
    t = src;
    const bool gate = name.starts_with(names::kGatePrefix);
    if (gate ? !config.unfreeze_gate : !config.unfreeze_encoders) out.frozen.insert(name);
  }
  return out;
}

template <typename T>
Var classify_forward(ParamBinder<T>& p, const std::vector<std::string>& leads, std::span<const Var> inputs,
                     double dropout, CounterRng* dropout_rng) {
  if (inputs.size() != leads.size()) throw ShapeError("one input per lead is required");
  std::vector<ExpertVars> experts;
  experts.reserve(leads.size());
  for (std::size_t m = 0; m < leads.size(); ++m) experts.push_back(encoder_forward(p, leads[m], inputs[m]));
  const auto fusion = hime_forward(p, std::span<const ExpertVars>(experts), static_cast<const Tensor<T>*>(nullptr));
  return classifier_forward(p, fusion.joint.mu, dropout, dropout_rng);
}

std::vector<float> joint_features(const FinetuneModel& model, const EcgRecord& record) {
  Tape<float> tape;
  ParamBinder<float> binder(tape, model.params);
  std::vector<ExpertVars> experts;
  const auto inputs = lead_inputs<float>(record, model.config.leads);
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    experts.push_back(encoder_forward(binder, model.config.leads[m], tape.constant(inputs[m])));
  }
  const auto fusion =
      hime_forward(binder, std::span<const ExpertVars>(experts), static_cast<const Tensor<float>*>(nullptr));
  return tape.value(fusion.joint.mu).data;
}

// ------------------------------------------------------------------ metrics

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Count concordant pairs in half units so ties stay exact.
  std::uint64_t half_units = 0, neg_below = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t p = 0, q = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      const int y = labels[order[j]];
      if (y != 0 && y != 1) throw DomainError("labels must be 0 or 1");
      (y == 1 ? p : q) += 1;
      ++j;
    }
    half_units += 2 * p * neg_below + p * q;
    neg_below += q;
    pos += p;
    neg += q;
    i = j;
  }
  if (pos == 0 || neg == 0) throw UndefinedMetric("AUROC needs both classes");
  return static_cast<double>(half_units) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

Confusion confusion(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool y = labels[i] == 1, p = predicted[i] == 1;
    if (y && p) ++c.tp;
    else if (!y && !p) ++c.tn;
    else if (p) ++c.fp;
    else ++c.fn;
  }
  return c;
}

double mcc(const Confusion& c) {
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (den == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(den);
}

double accuracy(const Confusion& c) {
  const std::size_t n = c.tp + c.tn + c.fp + c.fn;
  if (n == 0) throw UndefinedMetric("accuracy of an empty set");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(n);
}

std::vector<std::size_t> kfold_split(std::span<const int> labels, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("folds must be >= 2");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DomainError("labels must be 0 or 1");
    by_class[labels[i]].push_back(i);
  }
  std::vector<std::size_t> out(labels.size());
  std::size_t offset = 0;
  const CounterRng root(seed);
  for (int c = 0; c < 2; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < folds) {
      throw StratificationError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                                " samples, fewer than " + std::to_string(folds) + " folds");
    }
    CounterRng rng = root.fork(static_cast<std::uint64_t>(c));
    rng.shuffle(idx);
    // Continue the round robin across classes so fold sizes differ by at most one.
    for (std::size_t k = 0; k < idx.size(); ++k) out[idx[k]] = (offset + k) % folds;
    offset = (offset + idx.size()) % folds;
  }
  return out;
}

PawpResult pawp_from_cmr(double lav_ml, double lvm_g) {
  if (!(lav_ml >= 0.0) || !(lvm_g >= 0.0)) throw DomainError("LAV and LVM must be non-negative");
  PawpResult r;
  r.pawp = 6.1352 + 0.07204 * lav_ml + 0.02256 * lvm_g;
  r.elevated = r.pawp > 15.0;
  return r;
}

FoldMetrics score_predictions(std::span<const Prediction> preds, std::size_t fold) {
  std::vector<double> scores;
  std::vector<int> labels, predicted;
  for (const auto& p : preds) {
    scores.push_back(p.score);
    labels.push_back(p.label);
    predicted.push_back(p.predicted);
  }
  FoldMetrics m;
  m.fold = fold;
  m.n = preds.size();
  m.auroc = auroc(scores, labels);
  const auto c = confusion(predicted, labels);
  m.accuracy = accuracy(c);
  m.mcc = mcc(c);
  return m;
}

namespace {

MetricSummary summarize(const std::vector<double>& v) {
  MetricSummary s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(v.size()));
  return s;
}

}  // namespace

MetricReport summarize_folds(std::vector<FoldMetrics> folds) {
  MetricReport r;
  std::vector<double> acc, auc, m;
  for (const auto& f : folds) {
    acc.push_back(f.accuracy);
    auc.push_back(f.auroc);
    m.push_back(f.mcc);
  }
  r.folds = std::move(folds);
  r.accuracy = summarize(acc);
  r.auroc = summarize(auc);
  r.mcc = summarize(m);
  return r;
}

std::vector<GroupMetrics> subgroup_report(std::span<const Prediction> preds) {
  std::map<std::string, std::vector<Prediction>> groups;
  for (const auto& p : preds) groups[p.group.value_or("-")].push_back(p);
  std::vector<GroupMetrics> out;
  auto add = [&](const std::string& name, std::span<const Prediction> g) {
    GroupMetrics gm;
    gm.group = name;
    gm.n = g.size();
    try {
      gm.metrics = score_predictions(g);
    } catch (const UndefinedMetric&) {
    }
    out.push_back(std::move(gm));
  };
  add("overall", preds);
  for (const auto& [name, g] : groups) add(name, g);
  return out;
}

std::string format_metric_report(const MetricReport& report) {
  std::ostringstream out;
  out << std::setprecision(9);
  out << "fold\tn\taccuracy\tauroc\tmcc\n";
  for (const auto& f : report.folds) {
    out << f.fold + 1 << '\t' << f.n << '\t' << f.accuracy << '\t' << f.auroc << '\t' << f.mcc << '\n';
  }
  out << "mean\t-\t" << report.accuracy.mean << '\t' << report.auroc.mean << '\t' << report.mcc.mean << '\n';
  out << "std\t-\t" << report.accuracy.std << '\t' << report.auroc.std << '\t' << report.mcc.std << '\n';
  return out.str();
}

std::string format_group_report(const std::vector<GroupMetrics>& groups) {
  std::ostringstream out;
  out << std::setprecision(9);
  out << "group\tn\taccuracy\tauroc\tmcc\tflag\n";
  for (const auto& g : groups) {
    out << g.group << '\t' << g.n << '\t';
    if (g.metrics) {
      out << g.metrics->accuracy << '\t' << g.metrics->auroc << '\t' << g.metrics->mcc << "\tok\n";
    } else {
      out << "-\t-\t-\tUndefinedMetric\n";
    }
  }
  return out.str();
}

std::string format_predictions(std::span<const Prediction> preds) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "record_id\tfold\tlabel\tscore\tpredicted\tgroup\n";
  for (const auto& p : preds) {
    out << p.record_id << '\t' << p.fold << '\t' << p.label << '\t' << p.score << '\t' << p.predicted << '\t'
        << p.group.value_or("-") << '\n';
  }
  return out.str();
}

std::vector<Prediction> parse_predictions(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<Prediction> out;
  std::getline(in, line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    Prediction p;
    std::string group;
    if (!(row >> p.record_id >> p.fold >> p.label >> p.score >> p.predicted >> group)) {
      throw CorruptFile("bad prediction row at line " + std::to_string(lineno));
    }
    if (group != "-") p.group = group;
    out.push_back(std::move(p));
  }
  return out;
}

// ------------------------------------------------------------------ training

namespace {

Prediction make_prediction(const EcgRecord& r, std::size_t fold, const std::vector<float>& logits) {
  if (logits.size() != 2) throw ShapeError("binary classifier expected");
  Prediction p;
  p.record_id = r.record_id;
  p.fold = fold;
  p.label = r.label.value_or(0);
  p.score = static_cast<double>(logits[1]) - static_cast<double>(logits[0]);
  p.predicted = logits[1] > logits[0] ? 1 : 0;
  p.group = r.group_tag;
  return p;
}

bool only_classifier_trains(const FinetuneModel& m) {
  for (const auto& name : m.trainable()) {
    if (!name.starts_with(names::kClassifierPrefix)) return false;
  }
  return true;
}

// Logits for one record, from cached features when available.
Var forward(ParamBinder<float>& binder, const FinetuneModel& model, const EcgRecord& record,
            const std::vector<float>* features, double dropout, CounterRng* rng) {
  auto& tape = binder.tape();
  if (features) {
    const Var x = tape.constant(Tensor<float>(Shape{features->size()}, *features));
    return classifier_forward(binder, x, dropout, rng);
  }
  std::vector<Var> inputs;
  for (auto& x : lead_inputs<float>(record, model.config.leads)) inputs.push_back(tape.constant(std::move(x)));
  return classify_forward(binder, model.config.leads, std::span<const Var>(inputs), dropout, rng);
}

}  // namespace

std::vector<Prediction> predict(const FinetuneModel& model, const std::vector<EcgRecord>& corpus) {
  std::vector<Prediction> out;
  for (const auto& r : corpus) {
    if (!r.label) throw CorpusError("record '" + r.record_id + "' has no label");
    Tape<float> tape;
    ParamBinder<float> binder(tape, model.params);
    const Var logits = forward(binder, model, r, nullptr, 0.0, nullptr);
    out.push_back(make_prediction(r, 0, tape.value(logits).data));
  }
  return out;
}

FinetuneResult finetune(const FinetuneModel& model, const std::vector<EcgRecord>& corpus,
                        const FinetuneConfig& config) {
  config.validate();
  if (corpus.empty()) throw CorpusError("corpus is empty");
  std::vector<int> labels;
  for (const auto& r : corpus) {
    if (!r.label) throw CorpusError("record '" + r.record_id + "' has no label");
    labels.push_back(*r.label);
    if (r.length != model.config.encoder.input_length) {
      throw CorpusError("record '" + r.record_id + "' has length " + std::to_string(r.length) + ", model expects " +
                        std::to_string(model.config.encoder.input_length));
    }
  }
  const auto fold_of = kfold_split(labels, config.folds, config.seed);

  FinetuneResult result;
  result.frozen_digest = param_digest(model.params, model.frozen);

  std::vector<std::vector<float>> features;
  const bool cached = only_classifier_trains(model);
  if (cached) {
    for (const auto& r : corpus) features.push_back(joint_features(model, r));
  }
  const CounterRng root(config.seed);
  const AdamWConfig adam{config.learning_rate, config.weight_decay};
  std::vector<FoldMetrics> fold_metrics;
  std::vector<Prediction> all_preds(corpus.size());

  for (std::size_t fold = 0; fold < config.folds; ++fold) {
    std::vector<std::size_t> train, val;
    for (std::size_t i = 0; i < corpus.size(); ++i) (fold_of[i] == fold ? val : train).push_back(i);

    FinetuneModel fm = model;
    ParamStore<float> grads;
    for (const auto& name : fm.trainable()) grads.add(name, Tensor<float>(fm.params.at(name).shape));
    OptimizerState<float> opt;
    const CounterRng fold_rng = root.fork(100 + fold);

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      std::vector<std::size_t> order = train;
      CounterRng shuffle = fold_rng.fork(1).fork(epoch);
      shuffle.shuffle(order);
      const CounterRng drop_epoch = fold_rng.fork(2).fork(epoch);
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(end));
        std::sort(batch.begin(), batch.end());
        grads.fill_zero();
        const float scale = 1.0f / static_cast<float>(batch.size());
        for (std::size_t idx : batch) {
          Tape<float> tape;
          ParamBinder<float> binder(tape, fm.params, &grads, &fm.frozen);
          CounterRng drop = drop_epoch.fork(idx);
          const Var logits = forward(binder, fm, corpus[idx], cached ? &features[idx] : nullptr, config.dropout, &drop);
          const Var loss = cross_entropy(tape, logits, labels[idx]);
          if (!std::isfinite(tape.value(loss)[0])) {
            throw DivergenceError("non-finite loss on record '" + corpus[idx].record_id + "'");
          }
          tape.backward(tape.mul_scalar(loss, scale));
        }
        adamw_step(fm.params, grads, opt, adam);
      }
    }
    if (param_digest(fm.params, fm.frozen) != result.frozen_digest) {
      throw ContractError("frozen parameters changed during fine-tuning");
    }

    std::vector<Prediction> preds;
    for (std::size_t idx : val) {
      Tape<float> tape;
      ParamBinder<float> binder(tape, fm.params);
      const Var logits = forward(binder, fm, corpus[idx], cached ? &features[idx] : nullptr, 0.0, nullptr);
      preds.push_back(make_prediction(corpus[idx], fold, tape.value(logits).data));
      all_preds[idx] = preds.back();
    }
    try {
      fold_metrics.push_back(score_predictions(preds, fold));
    } catch (const UndefinedMetric&) {
      throw StratificationError("fold " + std::to_string(fold + 1) + " validates a single class");
    }
    result.fold_models.push_back(std::move(fm));
  }
  result.predictions = std::move(all_preds);
  result.report = summarize_folds(std::move(fold_metrics));
  result.report.groups = subgroup_report(result.predictions);
  return result;
}

// ------------------------------------------------------------------- labels

std::vector<LabelEntry> read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorruptFile("cannot open labels file " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<LabelEntry> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream row(line);
    std::string col;
    while (std::getline(row, col, '\t')) cols.push_back(col);
    if (cols.size() < 2 || cols.size() > 3 || (cols[1] != "0" && cols[1] != "1")) {
      throw CorruptFile(path.string() + ":" + std::to_string(lineno) + ": expected record_id, 0/1 label, optional group");
    }
    LabelEntry e{cols[0], cols[1] == "1" ? 1 : 0, std::nullopt};
    if (cols.size() == 3 && !cols[2].empty() && cols[2] != "-") e.group = cols[2];
    out.push_back(std::move(e));
  }
  return out;
}

void write_labels(const std::vector<LabelEntry>& labels, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CorruptFile("cannot write labels file " + path.string());
  out << "record_id\tlabel\tgroup\n";
  for (const auto& e : labels) out << e.record_id << '\t' << e.label << '\t' << e.group.value_or("-") << '\n';
}

void apply_labels(std::vector<EcgRecord>& corpus, const std::vector<LabelEntry>& labels) {
  std::map<std::string, const LabelEntry*> by_id;
  for (const auto& e : labels) by_id[e.record_id] = &e;
  for (auto& r : corpus) {
    const auto it = by_id.find(r.record_id);
    if (it == by_id.end()) throw CorpusError("no label for record '" + r.record_id + "'");
    r.label = it->second->label;
    r.group_tag = it->second->group;
  }
}

template Var classify_forward<float>(ParamBinder<float>&, const std::vector<std::string>&, std::span<const Var>,
                                     double, CounterRng*);
template Var classify_forward<double>(ParamBinder<double>&, const std::vector<std::string>&, std::span<const Var>,
                                      double, CounterRng*);

}  // namespace lsemvae
