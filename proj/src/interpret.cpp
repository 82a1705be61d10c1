#include "lsemvae/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include "lsemvae/delineate.hpp"

namespace lsemvae {

std::vector<double> integrated_gradients(const Scorer& f, std::span<const double> x,
                                         std::span<const double> baseline, std::size_t steps) {
  if (x.size() != baseline.size()) throw ShapeError("baseline and input differ in size");
  if (steps < 1) throw ContractError("integrated gradients needs at least one step");
  const std::size_t n = x.size();
  std::vector<double> sum(n, 0.0);
  for (std::size_t k = 0; k < steps; ++k) {
    const double a = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
    Tensor<double> point(Shape{n});
    for (std::size_t i = 0; i < n; ++i) point[i] = baseline[i] + a * (x[i] - baseline[i]);
    Tape<double> tape;
    const Var in = tape.input(std::move(point), true);
    const Var out = f(tape, in);
    if (tape.size(out) != 1) throw ShapeError("scorer must return a scalar");
    tape.backward(out);
    const auto& g = tape.grad(in);
    for (std::size_t i = 0; i < n; ++i) sum[i] += g[i];
  }
  std::vector<double> alpha(n);
  for (std::size_t i = 0; i < n; ++i) alpha[i] = (x[i] - baseline[i]) * sum[i] / static_cast<double>(steps);
  return alpha;
}

double IgResult::total() const {
  double s = 0.0;
  for (const auto& a : alpha) {
    for (double v : a) s += v;
  }
  return s;
}

namespace {

std::vector<double> flatten(const EcgRecord& record, const std::vector<std::string>& leads) {
  std::vector<double> out;
  out.reserve(leads.size() * record.length);
  for (const auto& lead : leads) {
    const auto idx = record.lead_index(lead);
    if (!idx) throw LeadNotFound("record '" + record.record_id + "' has no lead " + lead);
    const auto sig = record.lead(*idx);
    out.insert(out.end(), sig.begin(), sig.end());
  }
  return out;
}

}  // namespace

IgResult integrated_gradients(const FinetuneModel& model, const EcgRecord& record, std::optional<int> target,
                              const EcgRecord* baseline, std::size_t steps) {
  const auto& leads = model.config.leads;
  const std::size_t len = record.length;
  const auto x = flatten(record, leads);
  const auto b = baseline ? flatten(*baseline, leads) : std::vector<double>(x.size(), 0.0);
  if (b.size() != x.size()) throw ShapeError("baseline record differs in shape");
  const ParamStore<double> params = model.params.cast<double>();

  auto logits = [&](Tape<double>& tape, Var in) {
    ParamBinder<double> binder(tape, params);
    std::vector<Var> inputs;
    for (std::size_t m = 0; m < leads.size(); ++m) {
      inputs.push_back(tape.reshape(tape.slice(in, m * len, len), Shape{1, len}));
    }
    return classify_forward(binder, leads, std::span<const Var>(inputs), 0.0, nullptr);
  };
  auto eval = [&](const std::vector<double>& v) {
    Tape<double> tape;
    return tape.value(logits(tape, tape.constant(Tensor<double>(Shape{v.size()}, v)))).data;
  };

  IgResult out;
  const auto at_x = eval(x);
  out.target = target.value_or(static_cast<int>(std::max_element(at_x.begin(), at_x.end()) - at_x.begin()));
  if (out.target < 0 || static_cast<std::size_t>(out.target) >= at_x.size()) {
    throw DomainError("target class " + std::to_string(out.target) + " out of range");
  }
  const auto t = static_cast<std::size_t>(out.target);
  out.f_input = at_x[t];
  out.f_baseline = eval(b)[t];
  const Scorer f = [&](Tape<double>& tape, Var in) { return tape.slice(logits(tape, in), t, 1); };
  const auto alpha = integrated_gradients(f, x, b, steps);
  for (std::size_t m = 0; m < leads.size(); ++m) {
    out.alpha.emplace_back(alpha.begin() + static_cast<std::ptrdiff_t>(m * len),
                           alpha.begin() + static_cast<std::ptrdiff_t>((m + 1) * len));
  }
  return out;
}

std::vector<double> normalize_attribution(std::span<const double> alpha) {
  std::vector<double> out(alpha.size(), 0.0);
  if (alpha.empty()) return out;
  const auto [lo, hi] = std::minmax_element(alpha.begin(), alpha.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < alpha.size(); ++i) out[i] = std::clamp((alpha[i] - *lo) / range, 0.0, 1.0);
  return out;
}

std::vector<std::size_t> salient_points(std::span<const double> alpha, double tau) {
  const auto norm = normalize_attribution(alpha);
  const auto [lo, hi] = std::minmax_element(alpha.begin(), alpha.end());
  std::vector<std::size_t> out;
  // A constant map distinguishes no point.
  if (alpha.empty() || !(*hi > *lo)) return out;
  for (std::size_t i = 0; i < norm.size(); ++i) {
    if (norm[i] >= tau) out.push_back(i);
  }
  return out;
}

double igar_lead(std::span<const double> alpha, double tau) {
  if (alpha.empty()) throw ShapeError("attribution vector is empty");
  return 100.0 * static_cast<double>(salient_points(alpha, tau).size()) / static_cast<double>(alpha.size());
}

std::optional<std::array<double, 5>> igar_wave(std::span<const double> alpha, const LeadSegments& segments,
                                               double tau) {
  const auto s = salient_points(alpha, tau);
  if (s.empty()) return std::nullopt;
  std::array<double, 5> pct{};
  for (std::size_t i : s) {
    for (int w = 0; w < 5; ++w) {
      const bool inside = std::any_of(segments.beats.begin(), segments.beats.end(),
                                      [&](const Beat& b) { return b.waves[w].contains(i); });
      if (inside) {
        pct[w] += 1.0;
        break;
      }
    }
  }
  for (double& p : pct) p = 100.0 * p / static_cast<double>(s.size());
  return pct;
}

RecordIgar record_igar(const FinetuneModel& model, const EcgRecord& record, double tau, std::size_t steps) {
  const auto ig = integrated_gradients(model, record, std::nullopt, nullptr, steps);
  RecordIgar out;
  out.record_id = record.record_id;
  out.leads = model.config.leads;
  for (std::size_t m = 0; m < out.leads.size(); ++m) {
    const auto& alpha = ig.alpha[m];
    out.lead_pct.push_back(igar_lead(alpha, tau));
    // Delineate each lead on its own so one unreadable lead does not void the rest.
    EcgRecord single;
    single.record_id = record.record_id;
    single.sample_rate_hz = record.sample_rate_hz;
    single.lead_names = {out.leads[m]};
    single.length = record.length;
    const auto sig = record.lead(*record.lead_index(out.leads[m]));
    single.samples.assign(sig.begin(), sig.end());
    std::optional<std::array<double, 5>> waves;
    try {
      const auto seg = delineate(single);
      waves = igar_wave(alpha, seg.leads.front(), tau);
    } catch (const DelineationFailure&) {
    }
    out.wave_pct.push_back(waves);
  }
  return out;
}

std::vector<RecordIgar> fold_igar(const std::vector<FinetuneModel>& fold_models,
                                  std::span<const Prediction> predictions, const std::vector<EcgRecord>& corpus,
                                  double tau, std::size_t steps) {
  std::map<std::string, const EcgRecord*> by_id;
  for (const auto& r : corpus) by_id[r.record_id] = &r;
  std::vector<RecordIgar> out;
  for (const auto& p : predictions) {
    if (p.fold >= fold_models.size()) throw CorpusError("prediction for '" + p.record_id + "' names a missing fold");
    const auto it = by_id.find(p.record_id);
    if (it == by_id.end()) throw CorpusError("no record '" + p.record_id + "' in corpus");
    out.push_back(record_igar(fold_models[p.fold], *it->second, tau, steps));
  }
  return out;
}

std::vector<IgarRow> igar_report(std::span<const RecordIgar> records) {
  if (records.empty()) return {};
  const auto& leads = records.front().leads;
  auto row = [](const std::string& lead, const std::string& wave, const std::vector<double>& v) {
    IgarRow r{lead, wave, 0.0, 0.0, v.size()};
    if (v.empty()) return r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    for (double x : v) r.std += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(r.std / static_cast<double>(v.size()));
    return r;
  };
  std::vector<IgarRow> out;
  for (std::size_t m = 0; m < leads.size(); ++m) {
    std::vector<double> lead_vals;
    std::array<std::vector<double>, 5> wave_vals;
    for (const auto& rec : records) {
      if (rec.leads != leads) throw ShapeError("records were attributed over different lead sets");
      lead_vals.push_back(rec.lead_pct[m]);
      if (rec.wave_pct[m]) {
        for (int w = 0; w < 5; ++w) wave_vals[w].push_back((*rec.wave_pct[m])[w]);
      }
    }
    out.push_back(row(leads[m], "all", lead_vals));
    for (Wave w : kWaves) out.push_back(row(leads[m], wave_name(w), wave_vals[static_cast<int>(w)]));
  }
  return out;
}

std::string format_igar_report(const std::vector<IgarRow>& rows) {
  std::ostringstream out;
  out << std::setprecision(9);
  out << "lead\twave\tmean_pct\tstd_pct\tn\n";
  for (const auto& r : rows) out << r.lead << '\t' << r.wave << '\t' << r.mean << '\t' << r.std << '\t' << r.n << '\n';
  return out.str();
}

}  // namespace lsemvae
