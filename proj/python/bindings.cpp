#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "lsemvae/cli.hpp"
#include "lsemvae/delineate.hpp"
#include "lsemvae/finetune.hpp"
#include "lsemvae/fusion.hpp"
#include "lsemvae/interpret.hpp"
#include "lsemvae/objectives.hpp"
#include "lsemvae/preprocess.hpp"
#include "lsemvae/synth.hpp"
#include "lsemvae/train.hpp"

namespace py = pybind11;
using namespace lsemvae;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vec(const Array& a) { return {a.data(), a.data() + a.size()}; }

Array to_array(const std::vector<double>& v) { return Array(static_cast<py::ssize_t>(v.size()), v.data()); }

FloatArray samples_of(const EcgRecord& r) {
  return FloatArray({static_cast<py::ssize_t>(r.num_leads()), static_cast<py::ssize_t>(r.length)}, r.samples.data());
}

void set_samples(EcgRecord& r, const FloatArray& a) {
  if (a.ndim() != 2) throw ShapeError("samples must be a [leads, length] array");
  r.length = static_cast<std::size_t>(a.shape(1));
  r.samples.assign(a.data(), a.data() + a.size());
}

// Moments given as [K, d] arrays of means and variances.
std::vector<GaussianExpert> experts_of(const Array& mus, const Array& vars) {
  if (mus.ndim() != 2 || vars.ndim() != 2 || mus.shape(0) != vars.shape(0) || mus.shape(1) != vars.shape(1)) {
    throw ShapeError("expert means and variances must both be [K, d]");
  }
  std::vector<GaussianExpert> out(static_cast<std::size_t>(mus.shape(0)));
  const auto d = mus.shape(1);
  for (py::ssize_t k = 0; k < mus.shape(0); ++k) {
    out[k].mu.assign(mus.data() + k * d, mus.data() + (k + 1) * d);
    out[k].var.assign(vars.data() + k * d, vars.data() + (k + 1) * d);
  }
  return out;
}

py::tuple expert_tuple(const GaussianExpert& e) { return py::make_tuple(to_array(e.mu), to_array(e.var)); }

py::list segments_of(const WaveSegments& s) {
  py::list leads;
  for (const auto& lead : s.leads) {
    py::list beats;
    for (const auto& beat : lead.beats) {
      py::dict b;
      for (Wave w : kWaves) b[wave_name(w)] = py::make_tuple(beat[w].start, beat[w].center, beat[w].end);
      beats.append(b);
    }
    leads.append(py::make_tuple(lead.lead, beats));
  }
  return leads;
}

}  // namespace

PYBIND11_MODULE(_lsemvae, m) {
  m.doc() = "Lead-specific multimodal ECG variational autoencoder";

  py::register_exception<Error>(m, "Error");

  py::class_<EcgRecord>(m, "EcgRecord")
      .def(py::init([](std::string record_id, double sample_rate_hz, std::vector<std::string> lead_names,
                       const FloatArray& samples, std::optional<int> label, std::optional<std::string> group) {
             EcgRecord r;
             r.record_id = std::move(record_id);
             r.sample_rate_hz = sample_rate_hz;
             r.lead_names = std::move(lead_names);
             set_samples(r, samples);
             r.label = label;
             r.group_tag = std::move(group);
             r.validate();
             return r;
           }),
           py::arg("record_id"), py::arg("sample_rate_hz"), py::arg("lead_names"), py::arg("samples"),
           py::arg("label") = py::none(), py::arg("group") = py::none())
      .def_readwrite("record_id", &EcgRecord::record_id)
      .def_readwrite("sample_rate_hz", &EcgRecord::sample_rate_hz)
      .def_readonly("lead_names", &EcgRecord::lead_names)
      .def_readonly("length", &EcgRecord::length)
      .def_readwrite("label", &EcgRecord::label)
      .def_readwrite("group_tag", &EcgRecord::group_tag)
      .def_property("samples", &samples_of, &set_samples)
      .def("lead", [](const EcgRecord& r, const std::string& name) {
        const auto idx = r.lead_index(name);
        if (!idx) throw LeadNotFound("no lead " + name);
        const auto s = r.lead(*idx);
        return FloatArray(static_cast<py::ssize_t>(s.size()), s.data());
      });

  m.def("read_record", &read_record, py::arg("path"));
  m.def("write_record", &write_record, py::arg("record"), py::arg("path"));
  m.def("encode_record", [](const EcgRecord& r) {
    const auto b = encode_record(r);
    return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
  });
  m.def("read_corpus", &read_corpus, py::arg("directory"));

  m.def(
      "synthesize_record",
      [](std::vector<std::string> leads, double duration_s, double sample_rate_hz, double heart_rate_bpm,
         double noise_std, std::uint64_t seed) {
        SynthSpec spec;
        spec.lead_names = std::move(leads);
        spec.duration_s = duration_s;
        spec.sample_rate_hz = sample_rate_hz;
        spec.heart_rate_bpm = heart_rate_bpm;
        spec.noise_std = noise_std;
        spec.seed = seed;
        auto res = synthesize_record(spec);
        return py::make_tuple(res.record, segments_of(res.truth));
      },
      py::arg("leads") = kTwelveLeads, py::arg("duration_s") = 10.0, py::arg("sample_rate_hz") = 500.0,
      py::arg("heart_rate_bpm") = 60.0, py::arg("noise_std") = 0.0, py::arg("seed") = 0,
      "Returns (record, ground-truth wave windows per lead).");
  m.def(
      "synthesize_corpus",
      [](std::size_t count, std::vector<std::string> leads, std::size_t length, double sample_rate_hz,
         const std::string& effect_lead, const std::string& effect_wave, double effect_magnitude, std::uint64_t seed) {
        CorpusSpec cs;
        cs.count = count;
        cs.leads = std::move(leads);
        cs.length = length;
        cs.sample_rate_hz = sample_rate_hz;
        Wave wave = Wave::S;
        bool found = false;
        for (Wave w : kWaves) {
          if (effect_wave == wave_name(w)) {
            wave = w;
            found = true;
          }
        }
        if (!found) throw SpecError("unknown wave " + effect_wave);
        cs.class_effect = {effect_lead, wave, effect_magnitude};
        cs.seed = seed;
        std::vector<EcgRecord> out;
        for (auto& r : synthesize_corpus(cs)) out.push_back(std::move(r.record));
        return out;
      },
      py::arg("count") = 200, py::arg("leads") = kTwelveLeads, py::arg("length") = 512,
      py::arg("sample_rate_hz") = 128.0, py::arg("effect_lead") = "II", py::arg("effect_wave") = "S",
      py::arg("effect_magnitude") = 0.5, py::arg("seed") = 0);

  m.def("interpolate_missing", [](const Array& x) { return to_array(interpolate_missing(to_vec(x))); });
  m.def(
      "bandpass_filter", [](const Array& x, double fs) { return to_array(bandpass_filter(to_vec(x), fs)); },
      py::arg("signal"), py::arg("sample_rate_hz"));
  m.def(
      "design_bandpass",
      [](double fs) {
        py::list sos;
        for (const auto& b : design_bandpass(fs)) sos.append(py::make_tuple(b.b0, b.b1, b.b2, 1.0, b.a1, b.a2));
        return sos;
      },
      py::arg("sample_rate_hz"), "Second-order sections as (b0, b1, b2, a0, a1, a2) rows.");
  m.def("zscore", [](const Array& x) { return to_array(zscore(to_vec(x))); });
  m.def("preprocess_record", [](const EcgRecord& r) { return preprocess_record(r); });
  m.def(
      "detect_r_peaks", [](const Array& x, double fs) { return detect_r_peaks(to_vec(x), fs); }, py::arg("signal"),
      py::arg("sample_rate_hz"));
  m.def("delineate", [](const EcgRecord& r) { return segments_of(delineate(r)); });

  m.def(
      "poe_fuse", [](const Array& mus, const Array& vars) { return expert_tuple(poe_fuse(experts_of(mus, vars))); },
      py::arg("mus"), py::arg("vars"), "Product of [K, d] Gaussian experts; returns (mu, var).");
  m.def(
      "moe_fuse",
      [](const Array& mus, const Array& vars, const Array& w) {
        return expert_tuple(moe_fuse(experts_of(mus, vars), to_vec(w)));
      },
      py::arg("mus"), py::arg("vars"), py::arg("weights"));
  m.def("gate_weights", [](const Array& logits) { return to_array(gate_weights(to_vec(logits))); });
  m.def("kl_standard_normal", [](const Array& mu, const Array& var) {
    return kl_standard_normal(GaussianExpert{to_vec(mu), to_vec(var)});
  });
  m.def(
      "lra_loss",
      [](const std::vector<std::vector<double>>& mus, const Array& joint, double gamma) {
        return lra_loss(mus, to_vec(joint), gamma);
      },
      py::arg("mus"), py::arg("joint_mu"), py::arg("gamma") = 0.1);
  m.def(
      "cross_entropy", [](const Array& logits, int label) { return cross_entropy(to_vec(logits), label); },
      py::arg("logits"), py::arg("label"));

  m.def(
      "auroc", [](const Array& scores, const std::vector<int>& labels) { return auroc(to_vec(scores), labels); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "mcc",
      [](const std::vector<int>& predicted, const std::vector<int>& labels) {
        return mcc(confusion(predicted, labels));
      },
      py::arg("predicted"), py::arg("labels"));
  m.def("kfold_split", &kfold_split, py::arg("labels"), py::arg("folds"), py::arg("seed"));
  m.def(
      "pawp_from_cmr",
      [](double lav, double lvm) {
        const auto r = pawp_from_cmr(lav, lvm);
        return py::make_tuple(r.pawp, r.elevated);
      },
      py::arg("lav_ml"), py::arg("lvm_g"), "Returns (pawp in mmHg, elevated).");
  m.def("resolve_leads", &resolve_leads);

  m.def(
      "pretrain",
      [](const std::vector<EcgRecord>& corpus, std::size_t epochs, std::size_t batch_size, std::size_t latent_dim,
         double learning_rate, std::uint64_t seed, const std::filesystem::path& checkpoint) {
        TrainConfig tc;
        tc.epochs = epochs;
        tc.batch_size = batch_size;
        tc.latent_dim = latent_dim;
        tc.learning_rate = learning_rate;
        tc.seed = seed;
        const auto res = pretrain(corpus, tc);
        if (!checkpoint.empty()) save_checkpoint(res.checkpoint(), checkpoint);
        return format_epoch_log(res.log);
      },
      py::arg("corpus"), py::arg("epochs"), py::arg("batch_size") = 128, py::arg("latent_dim") = 256,
      py::arg("learning_rate") = 1e-4, py::arg("seed") = 0, py::arg("checkpoint") = std::filesystem::path(),
      py::call_guard<py::gil_scoped_release>(), "Trains and returns the epoch log as TSV text.");

  py::class_<FinetuneModel>(m, "FinetuneModel")
      .def_static("load", [](const std::filesystem::path& p) { return FinetuneModel::from_checkpoint(load_checkpoint(p)); })
      .def_property_readonly("leads", [](const FinetuneModel& fm) { return fm.config.leads; })
      .def("predict", [](const FinetuneModel& fm, const std::vector<EcgRecord>& corpus) {
        return format_predictions(predict(fm, corpus));
      });

  m.def(
      "integrated_gradients",
      [](const FinetuneModel& model, const EcgRecord& record, std::optional<int> target, std::size_t steps) {
        const auto ig = integrated_gradients(model, record, target, nullptr, steps);
        py::dict out;
        out["target"] = ig.target;
        out["f_input"] = ig.f_input;
        out["f_baseline"] = ig.f_baseline;
        py::list alpha;
        for (const auto& a : ig.alpha) alpha.append(to_array(a));
        out["alpha"] = alpha;
        return out;
      },
      py::arg("model"), py::arg("record"), py::arg("target") = py::none(), py::arg("steps") = kDefaultIgSteps,
      "Attributions of the target logit against the all-zero baseline.");
  m.def("normalize_attribution", [](const Array& a) { return to_array(normalize_attribution(to_vec(a))); });
  m.def(
      "igar_lead", [](const Array& a, double tau) { return igar_lead(to_vec(a), tau); }, py::arg("alpha"),
      py::arg("tau") = kDefaultTau);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a CLI subcommand; returns (exit code, stdout, stderr).");
}
