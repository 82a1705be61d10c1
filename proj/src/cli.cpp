#include "lsemvae/cli.hpp"

#include <cctype>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "lsemvae/finetune.hpp"
#include "lsemvae/interpret.hpp"
#include "lsemvae/preprocess.hpp"
#include "lsemvae/synth.hpp"
#include "lsemvae/train.hpp"

namespace lsemvae::cli {

namespace fs = std::filesystem;

namespace {

class MissingFile : public Error {
 public:
  explicit MissingFile(const std::string& what) : Error("MissingFile: " + what) {}
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string underscored(std::string s) {
  for (auto& c : s) {
    if (c == '-') c = '_';
  }
  return s;
}

std::string dashed(std::string s) {
  for (auto& c : s) {
    if (c == '_') c = '-';
  }
  return s;
}

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string num(std::size_t v) { return std::to_string(v); }

std::string join(const std::vector<std::string>& v, char sep = ',') {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : std::string(1, sep)) + s;
  return out;
}

std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::map<std::string, std::vector<KeySpec>> build_schema() {
  const TrainConfig tc;
  const FinetuneConfig fc;
  const CorpusSpec cs;
  const KeySpec data{"data", "", "directory of .ecgr records"};
  const KeySpec labels{"labels", "", "labels file (record_id, label, group); empty uses labels stored in the records"};
  const KeySpec preprocess{"preprocess", "true", "apply interpolation, bandpass and z-score on load"};
  std::map<std::string, std::vector<KeySpec>> s;
  s["run"] = {
      {"root", "runs", std::string("directory holding run directories; defaults to $") + kRunRootEnv + " when set"},
      {"name", "", "run directory name under the root; defaults to the subcommand"},
  };
  s["synth"] = {
      {"out", "", "output directory for records and labels.tsv"},
      {"n", num(cs.count), "number of records"},
      {"leads", "all12", "lead count (first n standard leads), preset or comma list"},
      {"length", num(cs.length), "samples per lead"},
      {"sample_rate", num(cs.sample_rate_hz), "sampling rate in Hz"},
      {"heart_rate", num(cs.heart_rate_bpm), "mean heart rate in bpm"},
      {"heart_rate_spread", num(cs.heart_rate_spread), "per-record heart rate spread in bpm"},
      {"noise", num(cs.noise_std), "additive noise standard deviation (mV)"},
      {"amplitude_jitter", num(cs.amplitude_jitter), "relative wave amplitude spread"},
      {"baseline_wander", num(cs.baseline_wander), "baseline drift amplitude (mV)"},
      {"effect_lead", cs.class_effect.lead, "lead carrying the class-1 effect"},
      {"effect_wave", wave_name(cs.class_effect.wave), "wave carrying the class-1 effect (P, Q, R, S or T)"},
      {"effect_magnitude", num(cs.class_effect.magnitude), "class-1 amplitude change (mV)"},
      {"positive_fraction", num(cs.positive_fraction), "share of class-1 records"},
      {"groups", join(cs.groups), "group tags assigned round-robin; empty for none"},
      {"seed", num(std::size_t{cs.seed}), "random seed"},
  };
  s["pretrain"] = {
      data,
      preprocess,
      {"epochs", num(tc.epochs), "training epochs"},
      {"batch_size", num(tc.batch_size), "minibatch size"},
      {"learning_rate", num(tc.learning_rate), "AdamW learning rate"},
      {"weight_decay", num(tc.weight_decay), "AdamW decoupled weight decay"},
      {"latent_dim", num(tc.latent_dim), "latent dimension d"},
      {"gamma", num(tc.gamma), "alignment loss weight"},
      {"beta_ramp_fraction", num(tc.beta_ramp_fraction), "share of epochs over which beta ramps from 0 to 1"},
      {"grad_clip", num(tc.grad_clip), "gradient norm clip"},
      {"holdout_fraction", num(tc.holdout_fraction), "share of records held out for validation"},
      {"lambda", "", "per-lead reconstruction weights, comma list; empty uses the lead defaults"},
      {"seed", num(std::size_t{tc.seed}), "random seed"},
  };
  s["finetune"] = {
      data,
      labels,
      preprocess,
      {"pretrained", "", "pretraining checkpoint"},
      {"leads", "limb6", "lead subset: limb6, bipolar3, augmented3, all12 or a comma list"},
      {"epochs", num(fc.epochs), "training epochs per fold"},
      {"batch_size", num(fc.batch_size), "minibatch size"},
      {"learning_rate", num(fc.learning_rate), "AdamW learning rate"},
      {"weight_decay", num(fc.weight_decay), "AdamW decoupled weight decay"},
      {"fc_size", num(fc.fc_size), "classifier hidden width"},
      {"dropout", num(fc.dropout), "classifier dropout"},
      {"folds", num(fc.folds), "stratified cross-validation folds"},
      {"seed", num(std::size_t{fc.seed}), "random seed"},
      {"unfreeze_gate", "false", "train the gating network too"},
      {"unfreeze_encoders", "false", "train the lead encoders too"},
  };
  s["evaluate"] = {
      data,
      labels,
      preprocess,
      {"model", "", "fine-tuned checkpoint"},
  };
  s["interpret"] = {
      data,
      labels,
      preprocess,
      {"finetune_run", "", "fine-tuning run directory; each record is scored by the fold model that validated it"},
      {"model", "", "single fine-tuned checkpoint applied to every record (used when finetune_run is empty)"},
      {"tau", num(kDefaultTau), "saliency threshold on the normalized attribution"},
      {"steps", num(kDefaultIgSteps), "integrated-gradient steps"},
  };
  s["export-latents"] = {
      data,
      preprocess,
      {"checkpoint", "", "pretraining checkpoint"},
  };
  return s;
}

const std::vector<std::pair<std::string, std::string>> kCommands = {
    {"synth", "write a labelled synthetic ECG corpus"},
    {"pretrain", "unsupervised pretraining of encoders, gate and decoder"},
    {"finetune", "stratified k-fold fine-tuning of a classifier on frozen encoders"},
    {"evaluate", "score a fine-tuned checkpoint on a labelled corpus"},
    {"interpret", "integrated-gradient attribution ratios per lead and wave"},
    {"export-latents", "per-lead, PoE and MoE latent means of every record"},
};

// Resolved settings of one section.
class Settings {
 public:
  Settings(std::string section, std::map<std::string, std::string> values)
      : section_(std::move(section)), values_(std::move(values)) {}

  const std::string& str(const std::string& key) const { return values_.at(key); }

  std::string required(const std::string& key) const {
    const auto& v = str(key);
    if (v.empty()) fail(key, "is required");
    return v;
  }

  std::size_t size(const std::string& key) const {
    const auto& v = str(key);
    std::size_t out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size()) fail(key, "expected a non-negative integer, got '" + v + "'");
    return out;
  }

  double real(const std::string& key) const {
    const auto& v = str(key);
    double out = 0.0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size()) fail(key, "expected a number, got '" + v + "'");
    return out;
  }

  bool flag(const std::string& key) const {
    std::string v = str(key);
    for (auto& c : v) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    fail(key, "expected true or false, got '" + str(key) + "'");
  }

  fs::path existing(const std::string& key) const {
    const fs::path p = required(key);
    if (!fs::exists(p)) throw MissingFile(section_ + "." + key + ": " + p.string() + " does not exist");
    return p;
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(section_ + "." + key + ": " + what);
  }

  const std::string& section() const { return section_; }

 private:
  std::string section_;
  std::map<std::string, std::string> values_;
};

// Re-raise a library validation error with the section prepended, so the
// message reads as a key path ("pretrain.epochs must be >= 1").
template <typename F>
auto with_section(const std::string& section, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    const std::string prefix = "ConfigError: ";
    if (msg.starts_with(prefix)) msg = msg.substr(prefix.size());
    throw ConfigError(section + "." + msg);
  }
}

// Created only once a command has validated its inputs, so a rejected
// invocation leaves an earlier run in the same directory untouched.
class RunDir {
 public:
  RunDir(fs::path dir, std::string config, std::ostream& out)
      : dir_(std::move(dir)), config_(std::move(config)), out_(out) {}

  const fs::path& path() const { return dir_; }

  void open();

  void operator()(const std::string& line) {
    out_ << line << '\n';
    if (file_.is_open()) {
      file_ << line << '\n';
      file_.flush();
    }
  }

 private:
  fs::path dir_;
  std::string config_;
  std::ostream& out_;
  std::ofstream file_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CorruptFile("cannot write " + path.string());
  f << text;
}

void RunDir::open() {
  if (file_.is_open()) return;
  fs::create_directories(dir_);
  write_text(dir_ / "config.ini", config_);
  file_.open(dir_ / "run.log", std::ios::binary);
  if (!file_) throw CorruptFile("cannot write " + (dir_ / "run.log").string());
  (*this)("run directory " + dir_.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingFile("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string echo_config(const std::vector<const Settings*>& sections) {
  std::ostringstream os;
  os << "# resolved configuration\n";
  for (std::size_t i = 0; i < sections.size(); ++i) {
    const auto& s = *sections[i];
    os << (i ? "\n" : "") << '[' << s.section() << "]\n";
    for (const auto& k : config_schema().at(s.section())) os << k.key << " = " << s.str(k.key) << '\n';
  }
  return os.str();
}

std::vector<EcgRecord> load_corpus(const Settings& s, bool with_labels) {
  const fs::path dir = s.existing("data");
  if (!fs::is_directory(dir)) s.fail("data", dir.string() + " is not a directory");
  auto corpus = read_corpus(dir);
  if (corpus.empty()) throw CorpusError("no .ecgr records in " + dir.string());
  if (with_labels && !s.str("labels").empty()) apply_labels(corpus, read_labels(s.existing("labels")));
  if (s.flag("preprocess")) {
    for (auto& r : corpus) r = preprocess_record(r);
  }
  return corpus;
}

Wave parse_wave(const Settings& s, const std::string& key) {
  for (Wave w : kWaves) {
    if (s.str(key) == wave_name(w)) return w;
  }
  s.fail(key, "expected one of P, Q, R, S, T, got '" + s.str(key) + "'");
}

std::vector<std::string> parse_synth_leads(const Settings& s) {
  const auto& v = s.str("leads");
  if (!v.empty() && std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); })) {
    const std::size_t n = s.size("leads");
    if (n < 1 || n > kTwelveLeads.size()) s.fail("leads", "lead count must lie in 1..12");
    return {kTwelveLeads.begin(), kTwelveLeads.begin() + static_cast<std::ptrdiff_t>(n)};
  }
  return with_section(s.section(), [&] { return resolve_leads(v); });
}

std::string checkpoint_name(const std::string& stem) {
  return stem + ".v" + std::to_string(kCheckpointVersion) + ".ckpt";
}

Checkpoint load_kind(const Settings& s, const std::string& key, const std::string& kind) {
  auto ckpt = load_checkpoint(s.existing(key));
  const auto it = ckpt.metadata.find("kind");
  if (it == ckpt.metadata.end() || it->second != kind) s.fail(key, "not a " + kind + " checkpoint");
  return ckpt;
}

void write_reports(const fs::path& dir, std::span<const Prediction> preds, const MetricReport& report) {
  write_text(dir / "predictions.tsv", format_predictions(preds));
  write_text(dir / "metrics.tsv", format_metric_report(report));
  write_text(dir / "groups.tsv", format_group_report(report.groups));
}

// ------------------------------------------------------------- subcommands

int cmd_synth(const Settings& s, const Settings& run_settings, std::ostream& out) {
  const fs::path dir = s.required("out");
  CorpusSpec cs;
  cs.count = s.size("n");
  cs.leads = parse_synth_leads(s);
  cs.length = s.size("length");
  cs.sample_rate_hz = s.real("sample_rate");
  cs.heart_rate_bpm = s.real("heart_rate");
  cs.heart_rate_spread = s.real("heart_rate_spread");
  cs.noise_std = s.real("noise");
  cs.amplitude_jitter = s.real("amplitude_jitter");
  cs.baseline_wander = s.real("baseline_wander");
  cs.class_effect = {s.str("effect_lead"), parse_wave(s, "effect_wave"), s.real("effect_magnitude")};
  cs.positive_fraction = s.real("positive_fraction");
  cs.groups = split(s.str("groups"));
  cs.seed = s.size("seed");
  if (cs.count < 1) s.fail("n", "must be >= 1");

  const auto corpus = synthesize_corpus(cs);
  fs::create_directories(dir);
  std::vector<LabelEntry> labels;
  std::vector<WaveSegments> truth;
  for (const auto& r : corpus) {
    write_record(r.record, dir / (r.record.record_id + ".ecgr"));
    labels.push_back({r.record.record_id, r.record.label.value_or(0), r.record.group_tag});
    truth.push_back(r.truth);
  }
  write_labels(labels, dir / "labels.tsv");
  write_text(dir / "segments.tsv", format_segments(truth));
  write_text(dir / "config.ini", echo_config({&run_settings, &s}));
  out << "wrote " << corpus.size() << " records to " << dir.string() << '\n';
  return kExitOk;
}

int cmd_pretrain(const Settings& s, RunDir& log) {
  TrainConfig tc;
  tc.epochs = s.size("epochs");
  tc.batch_size = s.size("batch_size");
  tc.learning_rate = s.real("learning_rate");
  tc.weight_decay = s.real("weight_decay");
  tc.latent_dim = s.size("latent_dim");
  tc.gamma = s.real("gamma");
  tc.beta_ramp_fraction = s.real("beta_ramp_fraction");
  tc.grad_clip = s.real("grad_clip");
  tc.holdout_fraction = s.real("holdout_fraction");
  for (const auto& w : split(s.str("lambda"))) {
    double v = 0.0;
    const auto r = std::from_chars(w.data(), w.data() + w.size(), v);
    if (r.ec != std::errc() || r.ptr != w.data() + w.size()) s.fail("lambda", "bad weight '" + w + "'");
    tc.lambda.push_back(v);
  }
  tc.seed = s.size("seed");
  with_section("pretrain", [&] { tc.validate(); });
  const auto corpus = load_corpus(s, false);
  log.open();
  const fs::path& dir = log.path();
  fs::create_directories(dir / "checkpoints");
  tc.checkpoint_path = dir / "checkpoints" / checkpoint_name("pretrain");
  log("pretrain: " + std::to_string(corpus.size()) + " records, " + std::to_string(corpus.front().num_leads()) +
      " leads, L=" + std::to_string(corpus.front().length));
  const auto res = pretrain(corpus, tc, [&](const EpochLog& e, const ParamStore<float>&) {
    std::ostringstream os;
    os << "epoch " << e.epoch << "/" << tc.epochs << " total " << e.total << " mse " << e.mse << " kl " << e.kl
       << " lra " << e.lra << " beta " << e.beta;
    if (e.holdout_total) os << " holdout " << *e.holdout_total;
    log(os.str());
  });
  save_checkpoint(res.checkpoint(), tc.checkpoint_path);
  write_text(dir / "train_log.tsv", format_epoch_log(res.log));
  log("checkpoint " + tc.checkpoint_path.string());
  return kExitOk;
}

int cmd_finetune(const Settings& s, RunDir& log) {
  FinetuneConfig fc;
  fc.lead_subset = with_section("finetune", [&] { return resolve_leads(s.str("leads")); });
  fc.epochs = s.size("epochs");
  fc.batch_size = s.size("batch_size");
  fc.learning_rate = s.real("learning_rate");
  fc.weight_decay = s.real("weight_decay");
  fc.fc_size = s.size("fc_size");
  fc.dropout = s.real("dropout");
  fc.folds = s.size("folds");
  fc.seed = s.size("seed");
  fc.unfreeze_gate = s.flag("unfreeze_gate");
  fc.unfreeze_encoders = s.flag("unfreeze_encoders");
  with_section("finetune", [&] { fc.validate(); });
  const auto ckpt = load_kind(s, "pretrained", "pretrain");
  const auto corpus = load_corpus(s, true);
  const auto model = build_finetune_model(ModelConfig::from_metadata(ckpt.metadata), ckpt.params, fc);
  log.open();
  const fs::path& dir = log.path();
  log("finetune: " + std::to_string(corpus.size()) + " records, leads " + join(fc.lead_subset) + ", " +
      std::to_string(model.trainable().size()) + " trainable tensors");
  const auto res = finetune(model, corpus, fc);
  fs::create_directories(dir / "checkpoints");
  for (std::size_t k = 0; k < res.fold_models.size(); ++k) {
    save_checkpoint(res.fold_models[k].checkpoint(), dir / "checkpoints" / checkpoint_name("fold" + std::to_string(k)));
  }
  write_reports(dir, res.predictions, res.report);
  write_text(dir / "frozen_digest.txt", res.frozen_digest + "\n");
  log(format_metric_report(res.report));
  log(format_group_report(res.report.groups));
  return kExitOk;
}

int cmd_evaluate(const Settings& s, RunDir& log) {
  const auto model = FinetuneModel::from_checkpoint(load_kind(s, "model", "finetune"));
  const auto corpus = load_corpus(s, true);
  log.open();
  const auto preds = predict(model, corpus);
  auto report = summarize_folds({score_predictions(preds, 0)});
  report.groups = subgroup_report(preds);
  write_reports(log.path(), preds, report);
  log(format_metric_report(report));
  log(format_group_report(report.groups));
  return kExitOk;
}

int cmd_interpret(const Settings& s, RunDir& log) {
  const double tau = s.real("tau");
  const std::size_t steps = s.size("steps");
  if (!(tau > 0.0 && tau <= 1.0)) s.fail("tau", "must lie in (0, 1]");
  if (steps < 1) s.fail("steps", "must be >= 1");
  const auto corpus = load_corpus(s, true);
  std::vector<RecordIgar> records;
  if (!s.str("finetune_run").empty()) {
    const fs::path run = s.existing("finetune_run");
    std::vector<FinetuneModel> models;
    for (std::size_t k = 0;; ++k) {
      const auto p = run / "checkpoints" / checkpoint_name("fold" + std::to_string(k));
      if (!fs::exists(p)) break;
      models.push_back(FinetuneModel::from_checkpoint(load_checkpoint(p)));
    }
    if (models.empty()) throw MissingFile("no fold checkpoints under " + (run / "checkpoints").string());
    const auto preds = parse_predictions(read_text(run / "predictions.tsv"));
    log.open();
    log("interpret: " + std::to_string(preds.size()) + " held-out records over " + std::to_string(models.size()) +
        " folds, " + std::to_string(steps) + " steps");
    records = fold_igar(models, preds, corpus, tau, steps);
  } else if (!s.str("model").empty()) {
    const auto model = FinetuneModel::from_checkpoint(load_kind(s, "model", "finetune"));
    log.open();
    log("interpret: " + std::to_string(corpus.size()) + " records, " + std::to_string(steps) + " steps");
    for (const auto& r : corpus) records.push_back(record_igar(model, r, tau, steps));
  } else {
    s.fail("finetune_run", "set finetune_run or model");
  }
  const auto report = format_igar_report(igar_report(records));
  write_text(log.path() / "igar.tsv", report);
  log(report);
  return kExitOk;
}

int cmd_export_latents(const Settings& s, RunDir& log) {
  const auto ckpt = load_kind(s, "checkpoint", "pretrain");
  const auto model = ModelConfig::from_metadata(ckpt.metadata);
  const auto corpus = load_corpus(s, false);
  log.open();
  const auto rows = export_latents(model, ckpt.params, corpus);
  write_text(log.path() / "latents.tsv", format_latents(rows, model.encoder.latent_dim));
  log("wrote " + std::to_string(rows.size()) + " latent rows");
  return kExitOk;
}

}  // namespace

ConfigFile parse_config(const std::string& text, const std::string& origin) {
  ConfigFile cfg;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + "empty section name");
      cfg.values[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside any [section]");
    const std::string key = underscored(trim(std::string_view(line).substr(0, eq)));
    if (key.empty()) throw ConfigError(where + "empty key");
    const std::string path = section + "." + key;
    if (!cfg.values[section].emplace(key, trim(std::string_view(line).substr(eq + 1))).second) {
      throw ConfigError(where + "duplicate key " + path);
    }
    cfg.lines[path] = lineno;
  }
  return cfg;
}

const std::map<std::string, std::vector<KeySpec>>& config_schema() {
  static const auto schema = build_schema();
  return schema;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const auto& schema = config_schema();
  CLI::App app("Lead-specific multimodal ECG variational autoencoder", "lsemvae");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");
  app.get_formatter()->column_width(40);

  std::string config_path;
  std::map<std::string, CLI::Option*> flags;  // "command/section.key" -> option
  std::map<std::string, std::string> flag_values;
  auto add_keys = [&](CLI::App* sub, const std::string& command, const std::string& section) {
    for (const auto& k : schema.at(section)) {
      const std::string path = section + "." + k.key;
      const std::string name = std::string("--") + (section == "run" ? "run-" : "") + dashed(k.key);
      auto& target = flag_values[command + "/" + path];
      const bool boolean = k.default_value == "true" || k.default_value == "false";
      // Boolean keys are flags: bare means true, --flag=false is also accepted.
      auto* opt = boolean ? sub->add_flag(name, target, k.help) : sub->add_option(name, target, k.help);
      flags[command + "/" + path] = opt->default_str(k.default_value);
    }
  };
  for (const auto& [name, desc] : kCommands) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "key = value config file with [section] headers; flags override it");
    add_keys(sub, name, "run");
    add_keys(sub, name, name);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitBadConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    ConfigFile file;
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw MissingFile("config file " + config_path + " does not exist");
      file = parse_config(read_text(config_path), config_path);
      for (const auto& [section, values] : file.values) {
        const auto it = schema.find(section);
        if (it == schema.end()) {
          throw ConfigError(config_path + ": unknown section [" + section + "]");
        }
        for (const auto& [key, value] : values) {
          const bool known = std::any_of(it->second.begin(), it->second.end(), [&](const KeySpec& k) { return k.key == key; });
          if (!known) {
            throw ConfigError(config_path + ":" + std::to_string(file.lines.at(section + "." + key)) +
                              ": unknown key " + section + "." + key);
          }
        }
      }
    }
    // Precedence: flag, then config file, then environment (run root only), then default.
    auto resolve = [&](const std::string& section) {
      std::map<std::string, std::string> values;
      for (const auto& k : schema.at(section)) {
        const std::string path = section + "." + k.key;
        std::string v = k.default_value;
        if (path == "run.root") {
          if (const char* env = std::getenv(kRunRootEnv); env && *env) v = env;
        }
        if (const auto s = file.values.find(section); s != file.values.end()) {
          if (const auto f = s->second.find(k.key); f != s->second.end()) v = f->second;
        }
        if (flags.at(command + "/" + path)->count() > 0) v = flag_values.at(command + "/" + path);
        values[k.key] = v;
      }
      return Settings(section, std::move(values));
    };
    const Settings run_settings = resolve("run");
    const Settings settings = resolve(command);

    if (command == "synth") return cmd_synth(settings, run_settings, out);

    const std::string name = run_settings.str("name").empty() ? command : run_settings.str("name");
    const fs::path dir = fs::path(run_settings.str("root")) / name;
    RunDir log(dir, echo_config({&run_settings, &settings}), out);
    const auto t0 = std::chrono::steady_clock::now();
    int code = kExitOk;
    if (command == "pretrain") code = cmd_pretrain(settings, log);
    if (command == "finetune") code = cmd_finetune(settings, log);
    if (command == "evaluate") code = cmd_evaluate(settings, log);
    if (command == "interpret") code = cmd_interpret(settings, log);
    if (command == "export-latents") code = cmd_export_latents(settings, log);
    std::ostringstream done;
    done << command << " finished in " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
         << " s";
    log(done.str());
    return code;
  } catch (const MissingFile& e) {
    err << "error: " << e.what() << '\n';
    return kExitMissingFile;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace lsemvae::cli
