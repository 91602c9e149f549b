#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "promptseg/harness.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace promptseg;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"([dataset]
type = synthetic
image_size = 32
thing_classes = 4
stuff_classes = 2
train_images = 10
eval_images = 4
seed = 11

[protocol]
base = 4
increment = 2

[model]
embed_dim = 16
num_layers = 2
num_heads = 2
pixel_embed_dim = 16
mlp_hidden = 16
seed = 3

[training]
iters_per_class = 3
iter_scale = 1.0
batch_size = 2
seed = 5
)";

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("promptseg_harness_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("config parsing, defaults and canonical form") {
    ExperimentConfig cfg = ExperimentConfig::from_string(kTinyConfig);
    CHECK(cfg.dataset.scene.num_thing_classes == 4);
    CHECK(cfg.dataset.train_images == 10);
    CHECK(cfg.protocol.base == 4);
    CHECK(cfg.protocol.increment == 2);
    CHECK(cfg.model.cfg.embed_dim == 16);
    CHECK(cfg.model.cfg.image_height == 32);        // filled from the dataset
    CHECK(cfg.model.cfg.mask_height == 8);          // image / 4
    CHECK(cfg.training.hyper.iters_per_class == 3);
    // untouched sections keep their defaults
    CHECK(cfg.inference.delta == 0.5);
    CHECK(cfg.run.method == Method::eclipse);
    CHECK(cfg.training.hyper.lr_first == 1e-4);

    // canonical text is a fixed point and hashes stably
    std::string canon = cfg.canonical();
    ExperimentConfig back = ExperimentConfig::from_string(canon);
    CHECK(back.canonical() == canon);
    CHECK(back.hash() == cfg.hash());

    ExperimentConfig other = cfg;
    other.inference.delta = 0.25;
    CHECK(other.hash() != cfg.hash());
}

TEST_CASE("explicit protocol order: parse, canonical round-trip, validation") {
    std::string text = std::string(kTinyConfig) + "\n[protocol]\norder = 2,4,1,3,5,6\n";
    // a second [protocol] block continues the section, it does not duplicate it
    ExperimentConfig cfg = ExperimentConfig::from_string(text);
    CHECK(cfg.protocol.order == std::vector<int>{2, 4, 1, 3, 5, 6});
    std::string canon = cfg.canonical();
    CHECK(canon.find("order = 2,4,1,3,5,6") != std::string::npos);
    ExperimentConfig back = ExperimentConfig::from_string(canon);
    CHECK(back.canonical() == canon);

    // the explicit order drives the protocol split
    TaskProtocol p = build_protocol(make_catalog(cfg.dataset.scene), cfg.protocol.base,
                                    cfg.protocol.increment, cfg.protocol.mode,
                                    cfg.protocol.order);
    CHECK(p.steps.size() == 2);
    CHECK(p.steps[0] == std::vector<int>{2, 4, 1, 3});
    CHECK(p.steps[1] == std::vector<int>{5, 6});

    // not a permutation of the catalog
    CHECK_THROWS_AS(build_protocol(make_catalog(cfg.dataset.scene), 4, 2,
                                   cfg.protocol.mode, std::vector<int>{1, 1, 2, 3, 4, 5}),
                    ProtocolError);

    // order and ordering_seed are mutually exclusive
    CHECK_THROWS_AS(ExperimentConfig::from_string(
                        text + "\n[protocol]\nordering_seed = 7\n"),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_string(
                        std::string(kTinyConfig) + "\n[protocol]\norder = \n"),
                    ConfigError);
}

TEST_CASE("config rejection: unknown keys, bad values, duplicates") {
    CHECK_THROWS_AS(ExperimentConfig::from_string("[dataset]\nbogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_string("[nosuch]\nseed = 1\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_string("[dataset]\nseed = frog\n"),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_string("[dataset]\nseed = 1\nseed = 2\n"),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_string("seed = 1\n"), ConfigError);
    CHECK_THROWS_AS(
        ExperimentConfig::from_string("[inference]\ndelta = -1\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_file("/nonexistent/conf.txt"), ConfigError);
}

TEST_CASE("quantile by linear interpolation") {
    std::vector<double> v = {4.0, 1.0, 3.0, 2.0};  // unsorted on purpose
    CHECK(quantile(v, 0.0) == 1.0);
    CHECK(quantile(v, 1.0) == 4.0);
    CHECK(quantile(v, 0.5) == doctest::Approx(2.5));
    CHECK(quantile(v, 0.25) == doctest::Approx(1.75));
    CHECK(quantile({7.0}, 0.5) == 7.0);
    CHECK_THROWS_AS(quantile({}, 0.5), InputError);
}

TEST_CASE("checkpoint round-trip, digest and tamper detection") {
    ExperimentConfig cfg = ExperimentConfig::from_string(kTinyConfig);
    ClassCatalog cat = make_catalog(cfg.dataset.scene);
    TaskProtocol protocol =
        build_protocol(cat, cfg.protocol.base, cfg.protocol.increment, cfg.protocol.mode);
    ModelState state = init_model(cfg.model.cfg, cat, protocol, cfg.model.seed);
    add_step(state, protocol.steps[1], 7);

    fs::path dir = fresh_dir("ckpt");
    CHECK_FALSE(checkpoint_exists(dir.string()));
    save_checkpoint(dir.string(), state, protocol, cfg.hash(), cfg.model.seed);
    CHECK(checkpoint_exists(dir.string()));
    CHECK(checkpoint_config_hash(dir.string()) == cfg.hash());

    Checkpoint loaded = load_checkpoint(dir.string());
    CHECK(loaded.config_hash == cfg.hash());
    CHECK(loaded.model_seed == cfg.model.seed);
    CHECK(loaded.state.num_steps() == 2);
    // loading twice yields bit-identical states (f32 rounding is deterministic)
    Checkpoint loaded2 = load_checkpoint(dir.string());
    CHECK(state_digest(loaded.state) == state_digest(loaded2.state));
    REQUIRE(loaded.state.registry.size() == state.registry.size());
    double max_err = 0;
    for (size_t i = 0; i < state.registry.size(); ++i) {
        CHECK(loaded.state.registry[i]->group == state.registry[i]->group);
        CHECK(loaded.state.registry[i]->trainable == state.registry[i]->trainable);
        max_err = std::max(max_err, (loaded.state.registry[i]->value -
                                     state.registry[i]->value)
                                        .cwiseAbs()
                                        .maxCoeff());
    }
    CHECK(max_err < 1e-6);  // float32 round-trip only

    // flip one byte in the blob: every load must fail loudly
    fs::path blob = dir / "params.bin";
    std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(64);
    char b;
    f.seekg(64);
    f.read(&b, 1);
    b = static_cast<char>(b ^ 0x40);
    f.seekp(64);
    f.write(&b, 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir.string()), CheckpointError);
    fs::remove_all(dir);
}

TEST_CASE("scenario runs are deterministic and resumable") {
    ExperimentConfig cfg = ExperimentConfig::from_string(kTinyConfig);
    fs::path a = fresh_dir("run_a"), b = fresh_dir("run_b");

    ReportBundle ra = run_scenario(cfg, a.string());
    ReportBundle rb = run_scenario(cfg, b.string());
    CHECK(ra.config_hash == cfg.hash());
    REQUIRE(ra.per_step.size() == 2);

    // identical configs produce byte-identical artifacts
    for (const char* name : {"steps.csv", "training_log.csv", "config_resolved.txt"})
        CHECK(slurp(a / name) == slurp(b / name));
    CHECK(slurp(a / "sidecars" / "image_000000.json") ==
          slurp(b / "sidecars" / "image_000000.json"));

    // resume loads the checkpoints and reproduces the same evaluation
    std::string steps_before = slurp(a / "steps.csv");
    ReportBundle rr = run_scenario(cfg, a.string(), /*resume=*/true);
    CHECK(slurp(a / "steps.csv") == steps_before);
    CHECK(rr.final_pq.groups.at("all").pq ==
          doctest::Approx(ra.final_pq.groups.at("all").pq).epsilon(1e-15));

    // evaluation-only entry point agrees with the run that made the checkpoint
    ReportBundle re = evaluate_checkpoint(cfg, a.string());
    CHECK(re.final_pq.groups.at("all").pq == ra.final_pq.groups.at("all").pq);

    // a different config must refuse to reuse the directory
    ExperimentConfig changed = cfg;
    changed.inference.delta = 0.1;
    CHECK_THROWS_AS(run_scenario(changed, a.string()), CheckpointError);
    CHECK_THROWS_AS(run_scenario(changed, a.string(), true), CheckpointError);

    // delta sweep re-scores the cached sidecars; delta = 0.5 reproduces the
    // run evaluation exactly
    auto rows = sweep_delta(cfg, a.string(), {0.0, 0.5});
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].delta == 0.5);
    CHECK(rows[1].all_pq == ra.final_pq.groups.at("all").pq);
    CHECK(rows[1].base_pq == ra.final_pq.groups.at("base").pq);
    CHECK(rows[1].new_pq == ra.final_pq.groups.at("new").pq);
    auto again = sweep_delta(cfg, a.string(), {0.0, 0.5});
    CHECK(slurp(a / "delta_sweep.csv").find("# config_hash=" + cfg.hash()) == 0);
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].all_pq == again[i].all_pq);
        CHECK(rows[i].base_pq == again[i].base_pq);
    }

    // plots render from the CSVs and re-render identically
    emit_plots(a.string());
    REQUIRE(fs::exists(a / "plots" / "steps.svg"));
    REQUIRE(fs::exists(a / "plots" / "delta_sweep.svg"));
    std::string svg = slurp(a / "plots" / "steps.svg");
    emit_plots(a.string());
    CHECK(slurp(a / "plots" / "steps.svg") == svg);

    // plotting an empty directory quietly does nothing
    fs::path empty = fresh_dir("empty");
    fs::create_directories(empty);
    CHECK_NOTHROW(emit_plots(empty.string()));
    CHECK_FALSE(fs::exists(empty / "plots" / "steps.svg"));

    // exporting predictions produces a readable annotation tree
    fs::path exp = fresh_dir("export");
    export_predictions(cfg, a.string(), exp.string());
    CHECK(fs::exists(exp / "annotations.json"));

    fs::remove_all(a);
    fs::remove_all(b);
    fs::remove_all(empty);
    fs::remove_all(exp);
}

TEST_CASE("dataset cache round-trips through the native format") {
    ExperimentConfig cfg = ExperimentConfig::from_string(kTinyConfig);
    fs::path cache = fresh_dir("cache");
    cfg.dataset.cache_dir = cache.string();

    LoadedData first = load_data(cfg);
    CHECK(first.catalog.size() == 6);
    CHECK(first.train.size() == 10);
    CHECK(first.eval.size() == 4);
    CHECK(fs::exists(cache / "train"));

    LoadedData second = load_data(cfg);  // served from the cache
    REQUIRE(second.train.size() == first.train.size());
    CHECK(second.train[0].segment_map == first.train[0].segment_map);
    CHECK(second.train[0].image == first.train[0].image);
    CHECK(second.eval[3].segment_map == first.eval[3].segment_map);

    // train and eval draws are independent streams
    CHECK(first.train[0].segment_map != first.eval[0].segment_map);
    fs::remove_all(cache);
}
