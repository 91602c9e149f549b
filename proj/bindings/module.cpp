#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "promptseg/harness.hpp"

#include <cstdint>

namespace py = pybind11;
using namespace promptseg;

namespace {

py::dict group_scores_to_dict(const std::map<std::string, GroupScore>& groups) {
    py::dict out;
    for (const auto& [name, g] : groups) {
        py::dict row;
        row["pq"] = g.pq;
        row["sq"] = g.sq;
        row["rq"] = g.rq;
        row["classes"] = g.classes;
        out[py::str(name)] = row;
    }
    return out;
}

py::dict bundle_to_dict(const ReportBundle& b) {
    py::dict out;
    out["config_hash"] = b.config_hash;
    out["run_dir"] = b.run_dir;
    out["groups"] = group_scores_to_dict(b.final_pq.groups);
    py::list steps;
    for (const auto& sr : b.per_step) {
        py::dict row;
        row["step"] = sr.step;
        row["groups"] = group_scores_to_dict(sr.pq.groups);
        steps.append(row);
    }
    out["per_step"] = steps;
    return out;
}

py::dict sample_to_dict(const PanopticSample& s) {
    py::dict out;
    auto img = py::array_t<double>({3, s.height, s.width});
    std::copy(s.image.begin(), s.image.end(), img.mutable_data());
    auto seg = py::array_t<int32_t>({s.height, s.width});
    std::copy(s.segment_map.begin(), s.segment_map.end(), seg.mutable_data());
    out["image"] = img;
    out["segment_map"] = seg;
    py::list segs;
    for (const auto& info : s.segments) {
        py::dict d;
        d["segment_id"] = info.segment_id;
        d["class_id"] = info.class_id;
        d["is_thing"] = info.is_thing;
        segs.append(d);
    }
    out["segments"] = segs;
    return out;
}

}  // namespace

PYBIND11_MODULE(_promptseg, m) {
    m.doc() = "continual panoptic segmentation via frozen-base prompt tuning";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<InputError>(m, "InputError", PyExc_ValueError);

    m.def("build_id", &build_id, "build identifier stamped into artifacts");

    m.def(
        "config_hash",
        [](const std::string& text) { return ExperimentConfig::from_string(text).hash(); },
        py::arg("text"), "hash of the normalized experiment config");

    m.def(
        "config_canonical",
        [](const std::string& text) {
            return ExperimentConfig::from_string(text).canonical();
        },
        py::arg("text"), "normalized key=value rendering of a config");

    m.def(
        "generate_scenes",
        [](int thing_classes, int stuff_classes, uint64_t seed, int count, int size) {
            SceneGenConfig sc;
            sc.num_thing_classes = thing_classes;
            sc.num_stuff_classes = stuff_classes;
            sc.seed = seed;
            sc.height = size;
            sc.width = size;
            py::list out;
            for (const auto& s : generate_dataset(sc, count))
                out.append(sample_to_dict(s));
            return out;
        },
        py::arg("thing_classes"), py::arg("stuff_classes"), py::arg("seed"),
        py::arg("count"), py::arg("size") = 64,
        "deterministic synthetic panoptic scenes");

    m.def(
        "run_scenario",
        [](const std::string& config_text, const std::string& run_dir, bool resume) {
            return bundle_to_dict(
                run_scenario(ExperimentConfig::from_string(config_text), run_dir, resume));
        },
        py::arg("config_text"), py::arg("run_dir"), py::arg("resume") = false,
        "train and evaluate a full continual scenario");

    m.def(
        "evaluate_checkpoint",
        [](const std::string& config_text, const std::string& run_dir) {
            return bundle_to_dict(
                evaluate_checkpoint(ExperimentConfig::from_string(config_text), run_dir));
        },
        py::arg("config_text"), py::arg("run_dir"),
        "evaluate the final checkpoint of an existing run");

    m.def(
        "sweep_delta",
        [](const std::string& config_text, const std::string& run_dir,
           const std::vector<double>& deltas) {
            auto rows = sweep_delta(ExperimentConfig::from_string(config_text), run_dir,
                                    deltas);
            py::list out;
            for (const auto& r : rows) {
                py::dict d;
                d["delta"] = r.delta;
                d["base_pq"] = r.base_pq;
                d["new_pq"] = r.new_pq;
                d["all_pq"] = r.all_pq;
                out.append(d);
            }
            return out;
        },
        py::arg("config_text"), py::arg("run_dir"), py::arg("deltas"),
        "re-score cached per-query outputs under different suppression strengths");

    m.def(
        "manipulate_logits",
        [](const std::vector<Mat>& head_blocks, int head_index, double delta,
           bool logit_sum, bool tau_rule_all) {
            InferenceConfig cfg;
            cfg.delta = delta;
            cfg.logit_sum = logit_sum;
            cfg.tau_rule_all = tau_rule_all;
            auto out = manipulate_logits(head_blocks, head_index,
                                         static_cast<int>(head_blocks.size()), cfg);
            return py::make_tuple(out.own_probs, out.no_obj_scores);
        },
        py::arg("head_blocks"), py::arg("head_index"), py::arg("delta") = 0.5,
        py::arg("logit_sum") = false, py::arg("tau_rule_all") = false,
        "classification probabilities and the replaced no-object score for one head");

    m.def("quantile", &quantile, py::arg("values"), py::arg("q"),
          "linear-interpolation quantile of an unsorted sample");
}
