#include "promptseg/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace promptseg {

namespace {

json config_to_json(const ModelConfig& c) {
    return {{"image_height", c.image_height},
            {"image_width", c.image_width},
            {"embed_dim", c.embed_dim},
            {"num_layers", c.num_layers},
            {"num_heads", c.num_heads},
            {"pixel_embed_dim", c.pixel_embed_dim},
            {"mask_height", c.mask_height},
            {"mask_width", c.mask_width},
            {"mlp_hidden", c.mlp_hidden},
            {"mlp_depth", c.mlp_depth},
            {"prompt_mode", c.prompt_mode == PromptMode::deep ? "deep" : "shallow"},
            {"min_prompts", c.min_prompts}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.image_height = j.at("image_height").get<int>();
    c.image_width = j.at("image_width").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.pixel_embed_dim = j.at("pixel_embed_dim").get<int>();
    c.mask_height = j.at("mask_height").get<int>();
    c.mask_width = j.at("mask_width").get<int>();
    c.mlp_hidden = j.at("mlp_hidden").get<int>();
    c.mlp_depth = j.at("mlp_depth").get<int>();
    std::string mode = j.at("prompt_mode").get<std::string>();
    if (mode != "deep" && mode != "shallow")
        throw CheckpointError("unknown prompt_mode in manifest: " + mode);
    c.prompt_mode = mode == "deep" ? PromptMode::deep : PromptMode::shallow;
    c.min_prompts = j.at("min_prompts").get<int>();
    return c;
}

json catalog_to_json(const ClassCatalog& cat) {
    json out = json::array();
    for (const auto& c : cat.classes)
        out.push_back({{"id", c.class_id}, {"name", c.name}, {"is_thing", c.is_thing}});
    return out;
}

ClassCatalog catalog_from_json(const json& j) {
    ClassCatalog cat;
    for (const auto& e : j)
        cat.classes.push_back({e.at("id").get<int>(), e.at("name").get<std::string>(),
                               e.at("is_thing").get<bool>()});
    validate_catalog(cat);
    return cat;
}

json protocol_to_json(const TaskProtocol& p) {
    return {{"ordering", p.ordering},
            {"base_count", p.base_count},
            {"increment", p.increment},
            {"mode", p.mode == ProtocolMode::overlap ? "overlap" : "disjoint"},
            {"steps", p.steps}};
}

TaskProtocol protocol_from_json(const json& j) {
    TaskProtocol p;
    p.ordering = j.at("ordering").get<std::vector<int>>();
    p.base_count = j.at("base_count").get<int>();
    p.increment = j.at("increment").get<int>();
    std::string mode = j.at("mode").get<std::string>();
    if (mode != "overlap" && mode != "disjoint")
        throw CheckpointError("unknown protocol mode in manifest: " + mode);
    p.mode = mode == "overlap" ? ProtocolMode::overlap : ProtocolMode::disjoint;
    p.steps = j.at("steps").get<std::vector<std::vector<int>>>();
    return p;
}

std::string hash_f32(const std::vector<float>& v) {
    return hash_bytes(v.data(), v.size() * sizeof(float));
}

}  // namespace

void save_checkpoint(const std::string& dir, const ModelState& state,
                     const TaskProtocol& protocol, const std::string& config_hash,
                     uint64_t model_seed) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "promptseg-checkpoint-v1";
    manifest["config_hash"] = config_hash;
    manifest["model_seed"] = model_seed;
    manifest["model"] = config_to_json(state.cfg);
    manifest["catalog"] = catalog_to_json(state.catalog);
    manifest["protocol"] = protocol_to_json(protocol);
    manifest["trained_steps"] = state.num_steps();
    json step_classes = json::array();
    for (const auto& ps : state.prompt_sets) step_classes.push_back(ps.local_classes);
    manifest["step_classes"] = step_classes;

    std::ofstream blob(fs::path(dir) / "params.bin", std::ios::binary);
    if (!blob) throw CheckpointError("cannot write params.bin in " + dir);
    json tensors = json::array();
    long long offset = 0;
    for (const auto& p : state.registry) {
        std::vector<float> buf(static_cast<size_t>(p->value.size()));
        // column-major flatten, matching Eigen's default storage
        const double* src = p->value.data();
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(src[i]);
        blob.write(reinterpret_cast<const char*>(buf.data()),
                   static_cast<std::streamsize>(buf.size() * sizeof(float)));
        tensors.push_back({{"name", p->name},
                           {"group", p->group},
                           {"rows", p->value.rows()},
                           {"cols", p->value.cols()},
                           {"dtype", "f32"},
                           {"trainable", p->trainable},
                           {"hash", hash_f32(buf)},
                           {"offset", offset}});
        offset += static_cast<long long>(buf.size() * sizeof(float));
    }
    manifest["tensors"] = tensors;
    manifest["blob_bytes"] = offset;
    blob.close();
    if (!blob) throw CheckpointError("short write to params.bin in " + dir);

    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw CheckpointError("cannot write manifest.json in " + dir);
    mf << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw CheckpointError("cannot open manifest.json in " + dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("manifest parse failure: ") + e.what());
    }
    if (manifest.value("format", "") != "promptseg-checkpoint-v1")
        throw CheckpointError("unrecognized checkpoint format in " + dir);

    Checkpoint ck;
    ck.config_hash = manifest.at("config_hash").get<std::string>();
    ck.model_seed = manifest.at("model_seed").get<uint64_t>();
    ModelConfig cfg = config_from_json(manifest.at("model"));
    ClassCatalog catalog = catalog_from_json(manifest.at("catalog"));
    ck.protocol = protocol_from_json(manifest.at("protocol"));
    const int trained = manifest.at("trained_steps").get<int>();
    auto step_classes =
        manifest.at("step_classes").get<std::vector<std::vector<int>>>();
    if (static_cast<int>(step_classes.size()) != trained)
        throw CheckpointError("step_classes length disagrees with trained_steps");
    if (trained < 1 || trained > ck.protocol.num_steps())
        throw CheckpointError("trained_steps outside protocol range");

    ck.state = init_model(cfg, catalog, ck.protocol, ck.model_seed);
    for (int t = 2; t <= trained; ++t)
        add_step(ck.state, step_classes[t - 1], ck.model_seed + t);

    std::ifstream blob(fs::path(dir) / "params.bin", std::ios::binary);
    if (!blob) throw CheckpointError("cannot open params.bin in " + dir);

    std::map<std::string, ParamPtr> by_name;
    for (const auto& p : ck.state.registry) by_name[p->name] = p;

    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != ck.state.registry.size())
        throw CheckpointError("tensor count disagrees with rebuilt model");
    for (const auto& tj : tensors) {
        std::string name = tj.at("name").get<std::string>();
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw CheckpointError("manifest tensor not in model: " + name);
        ParamPtr p = it->second;
        auto rows = tj.at("rows").get<Eigen::Index>();
        auto cols = tj.at("cols").get<Eigen::Index>();
        if (rows != p->value.rows() || cols != p->value.cols())
            throw CheckpointError("shape mismatch for tensor " + name);
        if (tj.at("dtype").get<std::string>() != "f32")
            throw CheckpointError("unsupported dtype for tensor " + name);
        std::vector<float> buf(static_cast<size_t>(rows * cols));
        blob.seekg(tj.at("offset").get<long long>());
        blob.read(reinterpret_cast<char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!blob) throw CheckpointError("truncated params.bin reading " + name);
        if (hash_f32(buf) != tj.at("hash").get<std::string>())
            throw CheckpointError("content hash mismatch for tensor " + name);
        double* dst = p->value.data();
        for (size_t i = 0; i < buf.size(); ++i) dst[i] = buf[i];
        p->trainable = tj.at("trainable").get<bool>();
        p->group = tj.at("group").get<std::string>();
    }
    return ck;
}

std::string checkpoint_config_hash(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw CheckpointError("cannot open manifest.json in " + dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("manifest parse failure: ") + e.what());
    }
    return manifest.at("config_hash").get<std::string>();
}

bool checkpoint_exists(const std::string& dir) {
    return fs::exists(fs::path(dir) / "manifest.json") &&
           fs::exists(fs::path(dir) / "params.bin");
}

uint64_t state_digest(const ModelState& state) {
    Fnv1a h;
    for (const auto& p : state.registry)
        h.update(p->value.data(), static_cast<size_t>(p->value.size()) * sizeof(double));
    return h.digest();
}

}  // namespace promptseg
