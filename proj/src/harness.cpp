#include "promptseg/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace promptseg {

std::string build_id() {
#ifdef PROMPTSEG_BUILD_ID
    return PROMPTSEG_BUILD_ID;
#else
    return "untracked";
#endif
}

// ---- config parsing -------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

// raw section/key/value triples, order preserved
struct RawConfig {
    std::vector<std::tuple<std::string, std::string, std::string>> entries;
};

RawConfig tokenize_config(const std::string& text) {
    RawConfig raw;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) +
                                  ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError("line " + std::to_string(lineno) + ": empty section");
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (section.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": key outside a section");
        if (key.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        raw.entries.emplace_back(section, key, value);
    }
    return raw;
}

// consumption-tracked view over one section
class Section {
  public:
    Section(const RawConfig& raw, std::string name) : name_(std::move(name)) {
        for (const auto& [s, k, v] : raw.entries)
            if (s == name_) {
                if (values_.count(k))
                    throw ConfigError("duplicate key '" + k + "' in [" + name_ + "]");
                values_[k] = v;
            }
    }

    std::optional<std::string> take(const std::string& key) {
        auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        std::string v = it->second;
        values_.erase(it);
        return v;
    }

    void finish() const {
        if (!values_.empty())
            throw ConfigError("unknown key '" + values_.begin()->first + "' in [" +
                              name_ + "]");
    }

  private:
    std::string name_;
    std::map<std::string, std::string> values_;
};

long long parse_int(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        long long out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected integer, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected unsigned integer, got '" + v + "'");
    }
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

template <typename T, typename F>
void maybe(Section& s, const std::string& key, T& field, F parse) {
    if (auto v = s.take(key)) field = parse(*v, key);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_string(const std::string& text) {
    RawConfig raw = tokenize_config(text);
    static const std::set<std::string> known_sections = {
        "dataset", "protocol", "model", "training", "inference", "run"};
    for (const auto& [s, k, v] : raw.entries)
        if (!known_sections.count(s)) throw ConfigError("unknown section [" + s + "]");

    ExperimentConfig cfg;

    Section ds(raw, "dataset");
    if (auto v = ds.take("type")) {
        if (*v == "synthetic")
            cfg.dataset.kind = DatasetKind::synthetic;
        else if (*v == "coco")
            cfg.dataset.kind = DatasetKind::coco;
        else
            throw ConfigError("dataset type must be synthetic or coco, got '" + *v + "'");
    }
    maybe(ds, "image_size", cfg.dataset.scene.height, parse_int);
    cfg.dataset.scene.width = cfg.dataset.scene.height;
    maybe(ds, "thing_classes", cfg.dataset.scene.num_thing_classes, parse_int);
    maybe(ds, "stuff_classes", cfg.dataset.scene.num_stuff_classes, parse_int);
    maybe(ds, "max_instances", cfg.dataset.scene.max_instances_per_image, parse_int);
    maybe(ds, "seed", cfg.dataset.scene.seed, parse_u64);
    maybe(ds, "train_images", cfg.dataset.train_images, parse_int);
    maybe(ds, "eval_images", cfg.dataset.eval_images, parse_int);
    if (auto v = ds.take("cache_dir")) cfg.dataset.cache_dir = *v;
    if (auto v = ds.take("coco_train_annotations")) cfg.dataset.coco_train_annotations = *v;
    if (auto v = ds.take("coco_train_images")) cfg.dataset.coco_train_images = *v;
    if (auto v = ds.take("coco_eval_annotations")) cfg.dataset.coco_eval_annotations = *v;
    if (auto v = ds.take("coco_eval_images")) cfg.dataset.coco_eval_images = *v;
    ds.finish();

    Section ps(raw, "protocol");
    maybe(ps, "base", cfg.protocol.base, parse_int);
    maybe(ps, "increment", cfg.protocol.increment, parse_int);
    if (auto v = ps.take("mode")) {
        if (*v == "overlap")
            cfg.protocol.mode = ProtocolMode::overlap;
        else if (*v == "disjoint")
            cfg.protocol.mode = ProtocolMode::disjoint;
        else
            throw ConfigError("protocol mode must be overlap or disjoint, got '" + *v + "'");
    }
    if (auto v = ps.take("ordering_seed"))
        cfg.protocol.ordering_seed = parse_u64(*v, "ordering_seed");
    if (auto v = ps.take("order")) {
        std::stringstream ss(*v);
        std::string item;
        while (std::getline(ss, item, ','))
            cfg.protocol.order.push_back(parse_int(item, "order"));
        if (cfg.protocol.order.empty())
            throw ConfigError("protocol order must list at least one class id");
    }
    ps.finish();

    Section ms(raw, "model");
    maybe(ms, "embed_dim", cfg.model.cfg.embed_dim, parse_int);
    maybe(ms, "num_layers", cfg.model.cfg.num_layers, parse_int);
    maybe(ms, "num_heads", cfg.model.cfg.num_heads, parse_int);
    maybe(ms, "pixel_embed_dim", cfg.model.cfg.pixel_embed_dim, parse_int);
    maybe(ms, "mlp_hidden", cfg.model.cfg.mlp_hidden, parse_int);
    maybe(ms, "mlp_depth", cfg.model.cfg.mlp_depth, parse_int);
    maybe(ms, "min_prompts", cfg.model.cfg.min_prompts, parse_int);
    if (auto v = ms.take("prompt_mode")) {
        if (*v == "deep")
            cfg.model.cfg.prompt_mode = PromptMode::deep;
        else if (*v == "shallow")
            cfg.model.cfg.prompt_mode = PromptMode::shallow;
        else
            throw ConfigError("prompt_mode must be deep or shallow, got '" + *v + "'");
    }
    maybe(ms, "seed", cfg.model.seed, parse_u64);
    ms.finish();

    Section ts(raw, "training");
    maybe(ts, "iters_per_class", cfg.training.hyper.iters_per_class, parse_int);
    maybe(ts, "iter_scale", cfg.training.hyper.iter_scale, parse_double);
    maybe(ts, "lr_first", cfg.training.hyper.lr_first, parse_double);
    maybe(ts, "lr_later", cfg.training.hyper.lr_later, parse_double);
    maybe(ts, "batch_size", cfg.training.hyper.batch_size, parse_int);
    maybe(ts, "weight_decay", cfg.training.hyper.weight_decay, parse_double);
    maybe(ts, "seed", cfg.training.hyper.seed, parse_u64);
    maybe(ts, "w_cls", cfg.training.weights.w_cls, parse_double);
    maybe(ts, "w_bce", cfg.training.weights.w_bce, parse_double);
    maybe(ts, "w_dice", cfg.training.weights.w_dice, parse_double);
    ts.finish();

    Section is(raw, "inference");
    maybe(is, "delta", cfg.inference.delta, parse_double);
    maybe(is, "tau", cfg.inference.single_head_threshold, parse_double);
    maybe(is, "min_segment_pixels", cfg.inference.min_segment_pixels, parse_int);
    maybe(is, "tau_floor", cfg.inference.tau_floor, parse_bool);
    if (auto v = is.take("logit_space")) {
        if (*v == "prob_sum")
            cfg.inference.logit_sum = false;
        else if (*v == "logit_sum")
            cfg.inference.logit_sum = true;
        else
            throw ConfigError("logit_space must be prob_sum or logit_sum, got '" + *v + "'");
    }
    is.finish();

    Section rs(raw, "run");
    if (auto v = rs.take("method")) {
        if (*v == "eclipse")
            cfg.run.method = Method::eclipse;
        else if (*v == "finetune")
            cfg.run.method = Method::finetune;
        else
            throw ConfigError("method must be eclipse or finetune, got '" + *v + "'");
    }
    maybe(rs, "eval_miou", cfg.run.eval_miou, parse_bool);
    rs.finish();

    // the model sees images at the dataset's native size
    cfg.model.cfg.image_height = cfg.dataset.scene.height;
    cfg.model.cfg.image_width = cfg.dataset.scene.width;
    cfg.model.cfg.mask_height = cfg.dataset.scene.height / 4;
    cfg.model.cfg.mask_width = cfg.dataset.scene.width / 4;

    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str());
}

void ExperimentConfig::validate() const {
    if (dataset.kind == DatasetKind::synthetic) {
        validate_scene_config(dataset.scene);
        if (dataset.train_images < 1 || dataset.eval_images < 1)
            throw ConfigError("train_images and eval_images must be >= 1");
    } else {
        if (dataset.coco_train_annotations.empty() || dataset.coco_train_images.empty() ||
            dataset.coco_eval_annotations.empty() || dataset.coco_eval_images.empty())
            throw ConfigError("coco dataset requires the four coco_* paths");
    }
    if (protocol.base < 1 || protocol.increment < 0)
        throw ConfigError("protocol base must be >= 1 and increment >= 0");
    if (!protocol.order.empty() && protocol.ordering_seed)
        throw ConfigError("protocol order and ordering_seed are mutually exclusive");
    model.cfg.validate();
    training.hyper.validate();
    training.weights.validate();
    inference.validate();
}

std::string ExperimentConfig::canonical() const {
    std::ostringstream o;
    o << "[dataset]\n";
    o << "type = " << (dataset.kind == DatasetKind::synthetic ? "synthetic" : "coco")
      << "\n";
    o << "image_size = " << dataset.scene.height << "\n";
    o << "thing_classes = " << dataset.scene.num_thing_classes << "\n";
    o << "stuff_classes = " << dataset.scene.num_stuff_classes << "\n";
    o << "max_instances = " << dataset.scene.max_instances_per_image << "\n";
    o << "seed = " << dataset.scene.seed << "\n";
    o << "train_images = " << dataset.train_images << "\n";
    o << "eval_images = " << dataset.eval_images << "\n";
    if (!dataset.coco_train_annotations.empty()) {
        o << "coco_train_annotations = " << dataset.coco_train_annotations << "\n";
        o << "coco_train_images = " << dataset.coco_train_images << "\n";
        o << "coco_eval_annotations = " << dataset.coco_eval_annotations << "\n";
        o << "coco_eval_images = " << dataset.coco_eval_images << "\n";
    }
    o << "[protocol]\n";
    o << "base = " << protocol.base << "\n";
    o << "increment = " << protocol.increment << "\n";
    o << "mode = " << (protocol.mode == ProtocolMode::overlap ? "overlap" : "disjoint")
      << "\n";
    if (protocol.ordering_seed) o << "ordering_seed = " << *protocol.ordering_seed << "\n";
    if (!protocol.order.empty()) {
        o << "order = ";
        for (size_t i = 0; i < protocol.order.size(); ++i)
            o << (i ? "," : "") << protocol.order[i];
        o << "\n";
    }
    o << "[model]\n";
    o << "embed_dim = " << model.cfg.embed_dim << "\n";
    o << "num_layers = " << model.cfg.num_layers << "\n";
    o << "num_heads = " << model.cfg.num_heads << "\n";
    o << "pixel_embed_dim = " << model.cfg.pixel_embed_dim << "\n";
    o << "mlp_hidden = " << model.cfg.mlp_hidden << "\n";
    o << "mlp_depth = " << model.cfg.mlp_depth << "\n";
    o << "min_prompts = " << model.cfg.min_prompts << "\n";
    o << "prompt_mode = "
      << (model.cfg.prompt_mode == PromptMode::deep ? "deep" : "shallow") << "\n";
    o << "seed = " << model.seed << "\n";
    o << "[training]\n";
    o << "iters_per_class = " << training.hyper.iters_per_class << "\n";
    o << "iter_scale = " << training.hyper.iter_scale << "\n";
    o << "lr_first = " << training.hyper.lr_first << "\n";
    o << "lr_later = " << training.hyper.lr_later << "\n";
    o << "batch_size = " << training.hyper.batch_size << "\n";
    o << "weight_decay = " << training.hyper.weight_decay << "\n";
    o << "seed = " << training.hyper.seed << "\n";
    o << "w_cls = " << training.weights.w_cls << "\n";
    o << "w_bce = " << training.weights.w_bce << "\n";
    o << "w_dice = " << training.weights.w_dice << "\n";
    o << "[inference]\n";
    o << "delta = " << inference.delta << "\n";
    o << "tau = " << inference.single_head_threshold << "\n";
    o << "min_segment_pixels = " << inference.min_segment_pixels << "\n";
    if (inference.tau_floor) o << "tau_floor = true\n";
    o << "logit_space = " << (inference.logit_sum ? "logit_sum" : "prob_sum") << "\n";
    o << "[run]\n";
    o << "method = " << (run.method == Method::eclipse ? "eclipse" : "finetune") << "\n";
    o << "eval_miou = " << (run.eval_miou ? "true" : "false") << "\n";
    return o.str();
}

std::string ExperimentConfig::hash() const {
    Fnv1a h;
    h.update(canonical());
    return h.hex();
}

// ---- data -----------------------------------------------------------------

LoadedData load_data(const ExperimentConfig& cfg) {
    LoadedData out;
    if (cfg.dataset.kind == DatasetKind::coco) {
        auto [cat_train, train] = read_coco_panoptic(cfg.dataset.coco_train_annotations,
                                                     cfg.dataset.coco_train_images);
        auto [cat_eval, eval] = read_coco_panoptic(cfg.dataset.coco_eval_annotations,
                                                   cfg.dataset.coco_eval_images);
        if (cat_train.size() != cat_eval.size())
            throw InputError("train and eval catalogs disagree");
        out.catalog = cat_train;
        out.train = std::move(train);
        out.eval = std::move(eval);
        return out;
    }

    SceneGenConfig train_cfg = cfg.dataset.scene;
    SceneGenConfig eval_cfg = cfg.dataset.scene;
    eval_cfg.seed = Rng::mix(cfg.dataset.scene.seed, 0x5eedF00dULL);
    out.catalog = make_catalog(train_cfg);

    auto generate_or_cache = [&](const SceneGenConfig& scfg, int n,
                                 const std::string& sub) {
        if (!cfg.dataset.cache_dir.empty()) {
            fs::path dir = fs::path(cfg.dataset.cache_dir) / sub;
            if (fs::exists(dir / "manifest.json")) {
                auto [cat, samples] = read_cache(dir.string());
                if (cat.size() != out.catalog.size())
                    throw FormatError("cache catalog disagrees with config: " +
                                      dir.string());
                if (static_cast<int>(samples.size()) != n)
                    throw FormatError("cache sample count disagrees with config: " +
                                      dir.string());
                return samples;
            }
            auto samples = generate_dataset(scfg, n);
            write_cache(dir.string(), out.catalog, samples, scfg);
            return samples;
        }
        return generate_dataset(scfg, n);
    };
    out.train = generate_or_cache(train_cfg, cfg.dataset.train_images, "train");
    out.eval = generate_or_cache(eval_cfg, cfg.dataset.eval_images, "eval");
    return out;
}

// ---- evaluation machinery -------------------------------------------------

namespace {

std::string step_dir(const std::string& run_dir, int t) {
    return (fs::path(run_dir) / "checkpoints" / ("step_" + std::to_string(t))).string();
}

// ground truth restricted to classes introduced up to a given step
PanopticSample restrict_to_seen(const PanopticSample& s, const std::set<int>& seen) {
    PanopticSample out = s;
    std::set<int> dropped;
    out.segments.clear();
    for (const auto& seg : s.segments) {
        if (seen.count(seg.class_id))
            out.segments.push_back(seg);
        else
            dropped.insert(seg.segment_id);
    }
    if (!dropped.empty())
        for (auto& id : out.segment_map)
            if (dropped.count(id)) id = 0;
    return out;
}

std::set<int> seen_classes(const TaskProtocol& protocol, int upto) {
    std::set<int> seen;
    for (int t = 0; t < upto; ++t)
        seen.insert(protocol.steps[t].begin(), protocol.steps[t].end());
    return seen;
}

std::vector<std::vector<int>> step_class_lists(const ModelState& state) {
    std::vector<std::vector<int>> out;
    for (const auto& ps : state.prompt_sets) out.push_back(ps.local_classes);
    return out;
}

struct EvalOutput {
    PQResult pq;
    std::optional<MIoUResult> miou;
};

EvalOutput evaluate_state(const ModelState& state, const TaskProtocol& protocol, int upto,
                          const std::vector<PanopticSample>& eval_set,
                          const InferenceConfig& inf, const ClassCatalog& catalog,
                          const std::string& sidecar_dir, bool want_miou) {
    if (!sidecar_dir.empty()) fs::create_directories(sidecar_dir);
    std::set<int> seen = seen_classes(protocol, upto);
    auto classes = step_class_lists(state);

    std::vector<PanopticPrediction> preds;
    std::vector<PanopticSample> gts;
    std::vector<std::vector<int>> pred_maps, gt_maps;
    char name[64];
    for (size_t i = 0; i < eval_set.size(); ++i) {
        const PanopticSample& s = eval_set[i];
        auto sc = make_sidecar(state, image_to_mat(s), upto, inf);
        if (!sidecar_dir.empty()) {
            std::snprintf(name, sizeof(name), "image_%06zu.json", i);
            write_sidecar((fs::path(sidecar_dir) / name).string(), sc);
        }
        auto decisions = decisions_from_sidecar(sc, classes, upto, inf);
        PanopticPrediction pred =
            panoptic_merge(decisions, inf, catalog, s.height, s.width,
                           state.cfg.mask_height, state.cfg.mask_width);
        PanopticSample gt = restrict_to_seen(s, seen);
        if (want_miou) {
            pred_maps.push_back(semantic_merge(decisions, inf, catalog.size(), s.height,
                                               s.width, state.cfg.mask_height,
                                               state.cfg.mask_width));
            gt_maps.push_back(sample_class_map(gt));
        }
        preds.push_back(std::move(pred));
        gts.push_back(std::move(gt));
    }
    EvalOutput out;
    out.pq = panoptic_quality(preds, gts, catalog, &protocol);
    if (want_miou) out.miou = mean_iou(pred_maps, gt_maps, catalog, &protocol);
    return out;
}

void write_artifact_header(std::ofstream& f, const std::string& config_hash) {
    f << "# config_hash=" << config_hash << " build=" << build_id() << "\n";
}

void append_steps_csv(const std::string& run_dir, const std::string& config_hash,
                      const std::vector<StepReport>& reports) {
    std::ofstream f(fs::path(run_dir) / "steps.csv");
    write_artifact_header(f, config_hash);
    f << "step,group,pq,sq,rq,classes\n";
    for (const auto& r : reports)
        for (const std::string& g : {"base", "new", "all", "things", "stuff"}) {
            auto it = r.pq.groups.find(g);
            if (it == r.pq.groups.end()) continue;
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%d,%s,%.6f,%.6f,%.6f,%d\n", r.step,
                          g.c_str(), it->second.pq, it->second.sq, it->second.rq,
                          it->second.classes);
            f << buf;
        }
}

void write_training_log(const std::string& run_dir, const std::string& config_hash,
                        const std::vector<TrainLogEntry>& log) {
    std::ofstream f(fs::path(run_dir) / "training_log.csv");
    write_artifact_header(f, config_hash);
    f << "step,iter,loss,loss_cls,loss_bce,loss_dice,lr\n";
    for (const auto& e : log) {
        char buf[200];
        std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f,%.6f,%.6f,%.6g\n", e.step,
                      e.iter, e.loss, e.loss_cls, e.loss_bce, e.loss_dice, e.lr);
        f << buf;
    }
}

json pq_to_json(const PQResult& pq) {
    json groups = json::object();
    for (const auto& [name, g] : pq.groups)
        groups[name] = {{"pq", g.pq}, {"sq", g.sq}, {"rq", g.rq}, {"classes", g.classes}};
    json per_class = json::object();
    for (const auto& [cid, st] : pq.per_class) {
        if (!st.touched()) continue;
        per_class[std::to_string(cid)] = {{"pq", st.pq()}, {"sq", st.sq()},
                                          {"rq", st.rq()}, {"tp", st.tp},
                                          {"fp", st.fp},   {"fn", st.fn}};
    }
    return {{"groups", groups}, {"per_class", per_class}};
}

void write_report(const std::string& run_dir, const ReportBundle& bundle,
                  const ExperimentConfig& cfg) {
    json root;
    root["config_hash"] = bundle.config_hash;
    root["build"] = build_id();
    root["method"] = cfg.run.method == Method::eclipse ? "eclipse" : "finetune";
    json steps = json::array();
    for (const auto& r : bundle.per_step)
        steps.push_back({{"step", r.step}, {"pq", pq_to_json(r.pq)}});
    root["per_step"] = steps;
    root["final"] = pq_to_json(bundle.final_pq);
    if (bundle.final_miou) {
        json g = json::object();
        for (const auto& [name, v] : bundle.final_miou->groups) g[name] = v;
        root["final_miou_groups"] = g;
    }
    std::ofstream f(fs::path(run_dir) / "report.json");
    f << root.dump(2) << "\n";
}

double group_pq(const PQResult& pq, const std::string& name) {
    auto it = pq.groups.find(name);
    return it == pq.groups.end() ? 0.0 : it->second.pq;
}

InferenceConfig effective_inference(const ExperimentConfig& cfg) {
    InferenceConfig inf = cfg.inference;
    // the naive baseline has no cross-head suppression
    if (cfg.run.method == Method::finetune) inf.tau_rule_all = true;
    return inf;
}

void check_run_dir_compatible(const ExperimentConfig& cfg, const std::string& run_dir,
                              int num_steps) {
    for (int t = 1; t <= num_steps; ++t) {
        std::string dir = step_dir(run_dir, t);
        if (checkpoint_exists(dir) && checkpoint_config_hash(dir) != cfg.hash())
            throw CheckpointError("run directory " + run_dir +
                                  " holds checkpoints of a different config");
    }
}

// Protocol implied by a config: explicit order wins over the seeded shuffle.
TaskProtocol protocol_for(const ExperimentConfig& cfg, const ClassCatalog& catalog) {
    if (!cfg.protocol.order.empty())
        return build_protocol(catalog, cfg.protocol.base, cfg.protocol.increment,
                              cfg.protocol.mode, cfg.protocol.order);
    return build_protocol(catalog, cfg.protocol.base, cfg.protocol.increment,
                          cfg.protocol.mode, cfg.protocol.ordering_seed);
}

}  // namespace

// ---- scenarios ------------------------------------------------------------

ReportBundle run_scenario(const ExperimentConfig& cfg, const std::string& run_dir,
                          bool resume) {
    cfg.validate();
    LoadedData data = load_data(cfg);
    TaskProtocol protocol = protocol_for(cfg, data.catalog);
    const int T = protocol.num_steps();
    const std::string config_hash = cfg.hash();
    fs::create_directories(run_dir);
    check_run_dir_compatible(cfg, run_dir, T);

    {
        std::ofstream f(fs::path(run_dir) / "config_resolved.txt");
        write_artifact_header(f, config_hash);
        f << cfg.canonical();
    }

    InferenceConfig inf = effective_inference(cfg);
    ReportBundle bundle;
    bundle.config_hash = config_hash;
    bundle.run_dir = run_dir;

    ModelState state = init_model(cfg.model.cfg, data.catalog, protocol, cfg.model.seed);
    std::vector<TrainLogEntry> full_log;

    for (int t = 1; t <= T; ++t) {
        const std::string ckdir = step_dir(run_dir, t);
        if (resume && checkpoint_exists(ckdir)) {
            state = load_checkpoint(ckdir).state;
        } else {
            if (t > 1) {
                add_step(state, protocol.steps[t - 1], cfg.model.seed + t);
                if (cfg.run.method == Method::finetune)
                    for (auto& p : state.registry) p->trainable = true;
            }
            auto step_data = step_view(data.train, protocol, t);
            TrainOptions opts;
            opts.include_prior_sets = cfg.run.method == Method::finetune && t > 1;
            auto log = train_task(state, step_data, t, cfg.training.hyper,
                                  cfg.training.weights, opts);
            full_log.insert(full_log.end(), log.begin(), log.end());
            save_checkpoint(ckdir, state, protocol, config_hash, cfg.model.seed);
        }
        // evaluate from the stored float32 weights so an eval-only re-run of
        // the same directory reproduces this report bit for bit
        ModelState eval_state = load_checkpoint(ckdir).state;
        const bool final_step = t == T;
        std::string sidecar_dir =
            final_step ? (fs::path(run_dir) / "sidecars").string() : "";
        EvalOutput ev =
            evaluate_state(eval_state, protocol, t, data.eval, inf, data.catalog,
                           sidecar_dir, final_step && cfg.run.eval_miou);
        bundle.per_step.push_back({t, ev.pq});
        if (final_step) {
            bundle.final_pq = ev.pq;
            bundle.final_miou = ev.miou;
        }
    }

    if (!full_log.empty()) write_training_log(run_dir, config_hash, full_log);
    append_steps_csv(run_dir, config_hash, bundle.per_step);
    write_report(run_dir, bundle, cfg);
    return bundle;
}

ReportBundle evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& run_dir) {
    cfg.validate();
    LoadedData data = load_data(cfg);
    TaskProtocol protocol = protocol_for(cfg, data.catalog);
    const int T = protocol.num_steps();
    const std::string ckdir = step_dir(run_dir, T);
    if (!checkpoint_exists(ckdir))
        throw CheckpointError("no final checkpoint under " + run_dir);
    if (checkpoint_config_hash(ckdir) != cfg.hash())
        throw CheckpointError("checkpoint in " + run_dir + " was made by another config");

    ModelState state = load_checkpoint(ckdir).state;
    InferenceConfig inf = effective_inference(cfg);
    EvalOutput ev = evaluate_state(state, protocol, T, data.eval, inf, data.catalog, "",
                                   cfg.run.eval_miou);
    ReportBundle bundle;
    bundle.config_hash = cfg.hash();
    bundle.run_dir = run_dir;
    bundle.per_step.push_back({T, ev.pq});
    bundle.final_pq = ev.pq;
    bundle.final_miou = ev.miou;
    return bundle;
}

// ---- delta sweep ----------------------------------------------------------

std::vector<DeltaRow> sweep_delta(const ExperimentConfig& cfg, const std::string& run_dir,
                                  const std::vector<double>& deltas) {
    cfg.validate();
    LoadedData data = load_data(cfg);
    TaskProtocol protocol = protocol_for(cfg, data.catalog);
    const int T = protocol.num_steps();
    fs::path sidecar_dir = fs::path(run_dir) / "sidecars";

    // the sidecars alone determine every row; load them once
    std::vector<std::vector<QuerySidecar>> sidecars;
    char name[64];
    for (size_t i = 0; i < data.eval.size(); ++i) {
        std::snprintf(name, sizeof(name), "image_%06zu.json", i);
        fs::path p = sidecar_dir / name;
        if (!fs::exists(p))
            throw StateError("missing sidecar " + p.string() +
                             "; run the scenario first");
        sidecars.push_back(read_sidecar(p.string()));
    }

    std::vector<DeltaRow> rows;
    const ModelConfig& mc = cfg.model.cfg;
    for (double d : deltas) {
        InferenceConfig inf = effective_inference(cfg);
        inf.delta = d;
        std::vector<PanopticPrediction> preds;
        std::vector<PanopticSample> gts;
        for (size_t i = 0; i < data.eval.size(); ++i) {
            const PanopticSample& s = data.eval[i];
            auto decisions =
                decisions_from_sidecar(sidecars[i], protocol.steps, T, inf);
            preds.push_back(panoptic_merge(decisions, inf, data.catalog, s.height,
                                           s.width, mc.mask_height, mc.mask_width));
            gts.push_back(s);
        }
        PQResult pq = panoptic_quality(preds, gts, data.catalog, &protocol);
        rows.push_back({d, group_pq(pq, "base"), group_pq(pq, "new"), group_pq(pq, "all")});
    }

    std::ofstream f(fs::path(run_dir) / "delta_sweep.csv");
    write_artifact_header(f, cfg.hash());
    f << "delta,base_pq,new_pq,all_pq\n";
    for (const auto& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%.6g,%.6f,%.6f,%.6f\n", r.delta, r.base_pq,
                      r.new_pq, r.all_pq);
        f << buf;
    }
    return rows;
}

// ---- ordering sweep -------------------------------------------------------

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw InputError("quantile of an empty sample");
    if (q < 0 || q > 1) throw InputError("quantile level outside [0,1]");
    std::sort(values.begin(), values.end());
    double pos = q * (static_cast<double>(values.size()) - 1);
    size_t lo = static_cast<size_t>(std::floor(pos));
    size_t hi = static_cast<size_t>(std::ceil(pos));
    double frac = pos - static_cast<double>(lo);
    return values[lo] * (1 - frac) + values[hi] * frac;
}

OrderingSummary sweep_orderings(const ExperimentConfig& cfg, const std::string& out_dir,
                                int n_orderings, bool resume) {
    if (n_orderings < 1) throw ConfigError("n_orderings must be >= 1");
    cfg.validate();
    fs::create_directories(out_dir);
    OrderingSummary summary;
    uint64_t base_seed = cfg.protocol.ordering_seed.value_or(1);
    for (int i = 0; i < n_orderings; ++i) {
        ExperimentConfig c = cfg;
        c.protocol.ordering_seed = base_seed + static_cast<uint64_t>(i);
        std::string dir = (fs::path(out_dir) / ("ordering_" + std::to_string(i))).string();
        ReportBundle b = run_scenario(c, dir, resume);
        summary.rows.push_back({*c.protocol.ordering_seed, group_pq(b.final_pq, "base"),
                                group_pq(b.final_pq, "new"), group_pq(b.final_pq, "all")});
    }
    std::vector<double> all;
    for (const auto& r : summary.rows) all.push_back(r.all_pq);
    summary.q1 = quantile(all, 0.25);
    summary.median = quantile(all, 0.5);
    summary.q3 = quantile(all, 0.75);

    std::ofstream f(fs::path(out_dir) / "orderings.csv");
    write_artifact_header(f, cfg.hash());
    f << "ordering_seed,base_pq,new_pq,all_pq\n";
    for (const auto& r : summary.rows) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%llu,%.6f,%.6f,%.6f\n",
                      static_cast<unsigned long long>(r.seed), r.base_pq, r.new_pq,
                      r.all_pq);
        f << buf;
    }
    std::ofstream s(fs::path(out_dir) / "orderings_summary.csv");
    write_artifact_header(s, cfg.hash());
    s << "q1,median,q3\n";
    char buf[120];
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f\n", summary.q1, summary.median,
                  summary.q3);
    s << buf;
    return summary;
}

// ---- ablations ------------------------------------------------------------

std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const std::string& out_dir,
                                const AblateSwitches& switches, bool resume) {
    cfg.validate();
    fs::create_directories(out_dir);
    std::vector<AblationRow> rows;

    auto run_variant = [&](const ExperimentConfig& c, const std::string& name) {
        std::string dir = (fs::path(out_dir) / name).string();
        ReportBundle b = run_scenario(c, dir, resume);
        TaskProtocol protocol = protocol_for(c, make_catalog(c.dataset.scene));
        ModelState st = load_checkpoint(step_dir(dir, protocol.num_steps())).state;
        AblationRow row;
        row.name = name;
        row.base_pq = group_pq(b.final_pq, "base");
        row.new_pq = group_pq(b.final_pq, "new");
        row.all_pq = group_pq(b.final_pq, "all");
        row.trainable_last_step = count_trainable(st);
        row.flops = count_flops(st, st.num_steps());
        rows.push_back(row);
        return b;
    };

    run_variant(cfg, "main");

    if (switches.shallow) {
        ExperimentConfig c = cfg;
        c.model.cfg.prompt_mode = PromptMode::shallow;
        run_variant(c, "shallow");
    }

    if (switches.no_logit_manipulation) {
        // evaluation-only change: re-score the main run's sidecars with the
        // fixed-threshold rule on every head
        ExperimentConfig c = cfg;
        c.inference.tau_rule_all = true;
        LoadedData data = load_data(cfg);
        TaskProtocol protocol = protocol_for(cfg, data.catalog);
        const int T = protocol.num_steps();
        fs::path sidecar_dir = fs::path(out_dir) / "main" / "sidecars";
        std::vector<PanopticPrediction> preds;
        std::vector<PanopticSample> gts;
        char name[64];
        for (size_t i = 0; i < data.eval.size(); ++i) {
            std::snprintf(name, sizeof(name), "image_%06zu.json", i);
            auto sc = read_sidecar((sidecar_dir / name).string());
            auto decisions = decisions_from_sidecar(sc, protocol.steps, T, c.inference);
            const PanopticSample& s = data.eval[i];
            preds.push_back(panoptic_merge(decisions, c.inference, data.catalog,
                                           s.height, s.width, cfg.model.cfg.mask_height,
                                           cfg.model.cfg.mask_width));
            gts.push_back(s);
        }
        PQResult pq = panoptic_quality(preds, gts, data.catalog, &protocol);
        ModelState st = load_checkpoint(step_dir((fs::path(out_dir) / "main").string(),
                                                 T)).state;
        rows.push_back({"no_logit_manipulation", group_pq(pq, "base"),
                        group_pq(pq, "new"), group_pq(pq, "all"), count_trainable(st),
                        count_flops(st, st.num_steps())});
    }

    if (switches.prompt_counts)
        for (int floor : switches.prompt_floors) {
            ExperimentConfig c = cfg;
            c.model.cfg.min_prompts = floor;
            run_variant(c, "prompts_" + std::to_string(floor));
        }

    std::ofstream f(fs::path(out_dir) / "ablation.csv");
    write_artifact_header(f, cfg.hash());
    f << "variant,base_pq,new_pq,all_pq,trainable,flops\n";
    for (const auto& r : rows) {
        char buf[240];
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%lld,%lld\n", r.name.c_str(),
                      r.base_pq, r.new_pq, r.all_pq, r.trainable_last_step, r.flops);
        f << buf;
    }
    return rows;
}

// ---- plots ----------------------------------------------------------------

namespace {

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

Csv read_csv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open " + path.string());
    Csv csv;
    std::string line;
    while (std::getline(f, line)) {
        line = trim(line);
        if (line.empty() || line.front() == '#') continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (csv.header.empty())
            csv.header = cells;
        else
            csv.rows.push_back(cells);
    }
    return csv;
}

int column(const Csv& csv, const std::string& name) {
    for (size_t i = 0; i < csv.header.size(); ++i)
        if (csv.header[i] == name) return static_cast<int>(i);
    throw FormatError("missing CSV column " + name);
}

// minimal line-plot SVG: one polyline per named series
void write_line_svg(const fs::path& out, const std::string& title,
                    const std::vector<double>& xs,
                    const std::vector<std::pair<std::string, std::vector<double>>>& series) {
    const int W = 640, H = 400, ml = 60, mr = 20, mt = 40, mb = 40;
    double xmin = xs.front(), xmax = xs.back();
    if (xmax == xmin) xmax = xmin + 1;
    double ymin = 0, ymax = 0;
    for (const auto& [n, ys] : series)
        for (double y : ys) ymax = std::max(ymax, y);
    if (ymax == 0) ymax = 1;
    ymax *= 1.05;
    auto X = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto Y = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"};
    std::ofstream f(out);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    f << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
      << title << "</text>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr
      << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
      << H - mb << "\" stroke=\"black\"/>\n";
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& [sname, ys] = series[si];
        f << "<polyline fill=\"none\" stroke=\"" << colors[si % 5]
          << "\" stroke-width=\"2\" points=\"";
        for (size_t i = 0; i < xs.size(); ++i) f << X(xs[i]) << "," << Y(ys[i]) << " ";
        f << "\"/>\n";
        f << "<text x=\"" << W - mr - 120 << "\" y=\"" << mt + 18 * (si + 1)
          << "\" fill=\"" << colors[si % 5] << "\" font-size=\"13\">" << sname
          << "</text>\n";
    }
    for (size_t i = 0; i < xs.size(); ++i)
        f << "<text x=\"" << X(xs[i]) << "\" y=\"" << H - mb + 18
          << "\" text-anchor=\"middle\" font-size=\"11\">" << xs[i] << "</text>\n";
    f << "</svg>\n";
}

void write_box_svg(const fs::path& out, const std::string& title,
                   const std::vector<double>& values) {
    const int W = 320, H = 400, mt = 40, mb = 40;
    double lo = *std::min_element(values.begin(), values.end());
    double hi = *std::max_element(values.begin(), values.end());
    if (hi == lo) hi = lo + 1e-6;
    double q1 = quantile(values, 0.25), med = quantile(values, 0.5),
           q3 = quantile(values, 0.75);
    auto Y = [&](double v) { return H - mb - (v - lo) / (hi - lo) * (H - mt - mb); };
    const int cx = W / 2, bw = 80;
    std::ofstream f(out);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    f << "<text x=\"" << cx << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
      << title << "</text>\n";
    f << "<line x1=\"" << cx << "\" y1=\"" << Y(lo) << "\" x2=\"" << cx << "\" y2=\""
      << Y(hi) << "\" stroke=\"black\"/>\n";
    f << "<rect x=\"" << cx - bw / 2 << "\" y=\"" << Y(q3) << "\" width=\"" << bw
      << "\" height=\"" << Y(q1) - Y(q3)
      << "\" fill=\"#aec7e8\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << cx - bw / 2 << "\" y1=\"" << Y(med) << "\" x2=\""
      << cx + bw / 2 << "\" y2=\"" << Y(med)
      << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    for (double v : {lo, hi})
        f << "<line x1=\"" << cx - bw / 4 << "\" y1=\"" << Y(v) << "\" x2=\""
          << cx + bw / 4 << "\" y2=\"" << Y(v) << "\" stroke=\"black\"/>\n";
    f << "</svg>\n";
}

}  // namespace

void emit_plots(const std::string& run_dir) {
    fs::path dir(run_dir);
    fs::path plots = dir / "plots";

    fs::path steps_csv = dir / "steps.csv";
    if (fs::exists(steps_csv)) {
        Csv csv = read_csv(steps_csv);
        int cs = column(csv, "step"), cg = column(csv, "group"), cp = column(csv, "pq");
        std::map<std::string, std::map<double, double>> by_group;
        for (const auto& r : csv.rows)
            by_group[r[cg]][std::stod(r[cs])] = std::stod(r[cp]);
        std::vector<double> xs;
        for (const auto& [x, y] : by_group["all"]) xs.push_back(x);
        if (!xs.empty()) {
            std::vector<std::pair<std::string, std::vector<double>>> series;
            for (const std::string& g : {"base", "new", "all"}) {
                auto it = by_group.find(g);
                if (it == by_group.end()) continue;
                std::vector<double> ys;
                bool complete = true;
                for (double x : xs) {
                    auto jt = it->second.find(x);
                    if (jt == it->second.end()) {
                        complete = false;
                        break;
                    }
                    ys.push_back(jt->second);
                }
                if (complete) series.emplace_back(g, ys);
            }
            fs::create_directories(plots);
            write_line_svg(plots / "steps.svg", "PQ per step", xs, series);
        }
    }

    fs::path delta_csv = dir / "delta_sweep.csv";
    if (fs::exists(delta_csv)) {
        Csv csv = read_csv(delta_csv);
        int cd = column(csv, "delta");
        std::vector<double> xs;
        std::vector<std::pair<std::string, std::vector<double>>> series = {
            {"base_pq", {}}, {"new_pq", {}}, {"all_pq", {}}};
        for (const auto& r : csv.rows) {
            xs.push_back(std::stod(r[cd]));
            for (auto& [name, ys] : series)
                ys.push_back(std::stod(r[column(csv, name)]));
        }
        if (!xs.empty()) {
            fs::create_directories(plots);
            write_line_svg(plots / "delta_sweep.svg", "PQ vs suppression strength", xs,
                           series);
        }
    }

    fs::path ord_csv = dir / "orderings.csv";
    if (fs::exists(ord_csv)) {
        Csv csv = read_csv(ord_csv);
        int ca = column(csv, "all_pq");
        std::vector<double> values;
        for (const auto& r : csv.rows) values.push_back(std::stod(r[ca]));
        if (!values.empty()) {
            fs::create_directories(plots);
            write_box_svg(plots / "orderings.svg", "all-PQ across orderings", values);
        }
    }
}

// ---- prediction export ----------------------------------------------------

void export_predictions(const ExperimentConfig& cfg, const std::string& run_dir,
                        const std::string& out_dir) {
    cfg.validate();
    LoadedData data = load_data(cfg);
    TaskProtocol protocol = protocol_for(cfg, data.catalog);
    const int T = protocol.num_steps();
    const std::string ckdir = step_dir(run_dir, T);
    if (!checkpoint_exists(ckdir))
        throw CheckpointError("no final checkpoint under " + run_dir);
    if (checkpoint_config_hash(ckdir) != cfg.hash())
        throw CheckpointError("checkpoint in " + run_dir + " was made by another config");
    ModelState state = load_checkpoint(ckdir).state;
    InferenceConfig inf = effective_inference(cfg);

    std::vector<PanopticSample> out_samples;
    for (const PanopticSample& s : data.eval) {
        auto decisions = evaluate_image(state, image_to_mat(s), T, inf);
        PanopticPrediction pred =
            panoptic_merge(decisions, inf, data.catalog, s.height, s.width,
                           state.cfg.mask_height, state.cfg.mask_width);
        PanopticSample ps;
        ps.height = s.height;
        ps.width = s.width;
        ps.image = s.image;
        ps.segment_map = pred.segment_map;
        for (const auto& seg : pred.segments)
            ps.segments.push_back({seg.segment_id, seg.class_id, seg.is_thing});
        out_samples.push_back(std::move(ps));
    }
    write_coco_panoptic(out_dir, data.catalog, out_samples);
}

}  // namespace promptseg
