#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "promptseg/model.hpp"

#include <cmath>

using namespace promptseg;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.image_height = 32;
    cfg.image_width = 32;
    cfg.mask_height = 8;
    cfg.mask_width = 8;
    cfg.embed_dim = 16;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.pixel_embed_dim = 16;
    cfg.mlp_hidden = 16;
    cfg.mlp_depth = 2;
    return cfg;
}

ClassCatalog catalog_of(int things, int stuff) {
    SceneGenConfig s;
    s.num_thing_classes = things;
    s.num_stuff_classes = stuff;
    return make_catalog(s);
}

struct Fixture {
    ClassCatalog cat;
    TaskProtocol protocol;
    ModelState state;
};

Fixture make_fixture(const ModelConfig& cfg, int things = 6, int stuff = 2,
                     int base = 4, int inc = 2, uint64_t seed = 1) {
    Fixture f;
    f.cat = catalog_of(things, stuff);
    f.protocol = build_protocol(f.cat, base, inc, ProtocolMode::overlap);
    f.state = init_model(cfg, f.cat, f.protocol, seed);
    return f;
}

Mat random_image(Rng& rng, const ModelConfig& cfg) {
    Mat img(3, cfg.image_height * cfg.image_width);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < img.cols(); ++c) img(r, c) = rng.uniform();
    return img;
}

// head parameters for one step with |C^t| = c
long long head_params(const ModelConfig& cfg, int c) {
    long long h = cfg.mlp_hidden, d = cfg.embed_dim, depth = cfg.mlp_depth;
    return d * h + h + (depth - 1) * (h * h + h) + h * c + c;
}

long long prompt_params(const ModelConfig& cfg, int n) {
    long long blocks = cfg.prompt_mode == PromptMode::deep ? cfg.num_layers : 1;
    return blocks * n * cfg.embed_dim;
}

}  // namespace

TEST_CASE("prompt count rule") {
    CHECK(prompt_count_for(3) == 10);
    CHECK(prompt_count_for(10) == 10);
    CHECK(prompt_count_for(12) == 12);
    CHECK(prompt_count_for(3, 20) == 20);
    CHECK(prompt_count_for(25, 20) == 25);
}

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_cfg();
    CHECK_NOTHROW(cfg.validate());
    cfg.embed_dim = 18;  // not divisible by heads
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_cfg();
    cfg.mask_height = 9;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("initialization is deterministic in the seed") {
    ModelConfig cfg = tiny_cfg();
    Fixture a = make_fixture(cfg), b = make_fixture(cfg);
    Fixture c = make_fixture(cfg, 6, 2, 4, 2, 2);
    REQUIRE(a.state.registry.size() == b.state.registry.size());
    bool all_equal = true, any_diff_seed = false;
    for (size_t i = 0; i < a.state.registry.size(); ++i) {
        all_equal &= a.state.registry[i]->value == b.state.registry[i]->value;
        any_diff_seed |= a.state.registry[i]->value != c.state.registry[i]->value;
    }
    CHECK(all_equal);
    CHECK(any_diff_seed);
    // everything trains at the first step
    for (const auto& p : a.state.registry) CHECK(p->trainable);
    CHECK(a.state.num_steps() == 1);
    CHECK(a.state.prompt_sets[0].n() == 10);  // max(4, 10)
}

TEST_CASE("add_step freezes history and opens a trainable prompt set and head") {
    Fixture f = make_fixture(tiny_cfg());
    add_step(f.state, f.protocol.steps[1], 9);
    CHECK(f.state.num_steps() == 2);
    for (const auto& p : f.state.registry) {
        bool is_new = p->group == "prompt_t2" || p->group == "head_t2";
        CHECK(p->trainable == is_new);
    }
    // duplicate classes are rejected
    CHECK_THROWS_AS(add_step(f.state, f.protocol.steps[1], 10), ProtocolError);
}

TEST_CASE("closed-form trainable parameter count at later steps") {
    std::vector<ModelConfig> cfgs;
    for (int variant = 0; variant < 5; ++variant) {
        ModelConfig cfg = tiny_cfg();
        if (variant == 1) cfg.num_layers = 3;
        if (variant == 2) cfg.prompt_mode = PromptMode::shallow;
        if (variant == 3) cfg.mlp_depth = 3;
        if (variant == 4) {
            cfg.embed_dim = 24;
            cfg.num_heads = 4;
            cfg.min_prompts = 12;
        }
        cfgs.push_back(cfg);
    }
    for (const auto& cfg : cfgs) {
        Fixture f = make_fixture(cfg, 9, 3, 4, 4);
        for (int t = 2; t <= f.protocol.num_steps(); ++t) {
            add_step(f.state, f.protocol.steps[t - 1], 100 + t);
            int c = static_cast<int>(f.protocol.steps[t - 1].size());
            int n = prompt_count_for(c, cfg.min_prompts);
            CHECK(count_trainable(f.state) == prompt_params(cfg, n) + head_params(cfg, c));
        }
    }
}

TEST_CASE("shallow prompting is the single-layer special case of deep") {
    ModelConfig deep = tiny_cfg();
    deep.num_layers = 1;
    ModelConfig shallow = deep;
    shallow.prompt_mode = PromptMode::shallow;
    Fixture a = make_fixture(deep), b = make_fixture(shallow);
    Rng rng(3);
    Mat img = random_image(rng, deep);
    StepOutput oa = forward_step(a.state, img, 1);
    StepOutput ob = forward_step(b.state, img, 1);
    CHECK(oa.class_logits == ob.class_logits);
    CHECK(oa.mask_logits == ob.mask_logits);
    CHECK(oa.decoder_embeddings == ob.decoder_embeddings);
}

TEST_CASE("forward_all decomposes into per-step forwards") {
    Fixture f = make_fixture(tiny_cfg());
    add_step(f.state, f.protocol.steps[1], 9);
    add_step(f.state, f.protocol.steps[2], 10);
    Rng rng(4);
    Mat img = random_image(rng, f.state.cfg);
    auto all = forward_all(f.state, img, 3);
    REQUIRE(all.size() == 3);
    for (int t = 1; t <= 3; ++t) {
        StepOutput single = forward_step(f.state, img, t);
        CHECK((all[t - 1].class_logits - single.class_logits).cwiseAbs().maxCoeff() <
              1e-12);
        CHECK((all[t - 1].mask_logits - single.mask_logits).cwiseAbs().maxCoeff() <
              1e-12);
    }
    CHECK_THROWS_AS(forward_all(f.state, img, 4), StateError);
}

TEST_CASE("output shapes") {
    Fixture f = make_fixture(tiny_cfg());
    Rng rng(5);
    Mat img = random_image(rng, f.state.cfg);
    const ModelConfig& cfg = f.state.cfg;

    Encoded enc = encode(f.state, img);
    CHECK(enc.tokens.rows() == cfg.tokens());
    CHECK(enc.tokens.cols() == cfg.embed_dim);
    CHECK(enc.pixel.rows() == cfg.pixel_embed_dim);
    CHECK(enc.pixel.cols() == cfg.mask_height * cfg.mask_width);

    StepOutput out = forward_step(f.state, img, 1);
    CHECK(out.class_logits.rows() == 10);
    CHECK(out.class_logits.cols() == 4);
    CHECK(out.mask_logits.rows() == 10);
    CHECK(out.mask_logits.cols() == cfg.mask_height * cfg.mask_width);
    CHECK(out.decoder_embeddings.rows() == 10);
    CHECK(out.decoder_embeddings.cols() == cfg.embed_dim);

    auto blocks = apply_heads(f.state, out.decoder_embeddings, {1});
    REQUIRE(blocks.size() == 1);
    CHECK(blocks[0] == out.class_logits);
}

TEST_CASE("clone is a deep copy") {
    Fixture f = make_fixture(tiny_cfg());
    ModelState copy = f.state.clone();
    REQUIRE(copy.registry.size() == f.state.registry.size());
    copy.registry[0]->value(0, 0) += 1.0;
    CHECK(copy.registry[0]->value(0, 0) != f.state.registry[0]->value(0, 0));
    // structural pointers were remapped, not aliased
    CHECK(copy.conv1_w != f.state.conv1_w);
    CHECK(copy.conv1_w->value.rows() == f.state.conv1_w->value.rows());
}

TEST_CASE("attention cost additivity") {
    ModelConfig cfg = tiny_cfg();
    Fixture f = make_fixture(cfg, 9, 3, 4, 4);
    add_step(f.state, f.protocol.steps[1], 11);
    add_step(f.state, f.protocol.steps[2], 12);

    std::vector<int> ns;
    long long expect = 0;
    for (const auto& ps : f.state.prompt_sets) {
        ns.push_back(ps.n());
        expect += attention_pairwise_cost(cfg, ps.n());
    }
    CHECK(attention_pairwise_ops(f.state, 3) == expect);

    long long total_n = 0;
    for (int n : ns) total_n += n;
    // separate per-set self-attention beats one pooled query set
    CHECK(expect < attention_pairwise_cost(cfg, static_cast<int>(total_n)));

    // closed form: per set, 2 * n^2 * D per layer
    CHECK(attention_pairwise_cost(cfg, 7) ==
          2LL * 7 * 7 * cfg.embed_dim * cfg.num_layers);
}

TEST_CASE("image_to_mat lays out channels by row") {
    PanopticSample s;
    s.height = 2;
    s.width = 2;
    s.image.resize(12);
    for (int i = 0; i < 12; ++i) s.image[i] = i / 12.0;
    Mat m = image_to_mat(s);
    REQUIRE(m.rows() == 3);
    REQUIRE(m.cols() == 4);
    for (int c = 0; c < 3; ++c)
        for (int p = 0; p < 4; ++p) CHECK(m(c, p) == (c * 4 + p) / 12.0);
}

TEST_CASE("frozen forward is identical before and after later-step weight noise") {
    // moving only step-2 parameters must not disturb step-1 outputs
    Fixture f = make_fixture(tiny_cfg());
    add_step(f.state, f.protocol.steps[1], 9);
    Rng rng(6);
    Mat img = random_image(rng, f.state.cfg);
    StepOutput before = forward_step(f.state, img, 1);
    for (auto& p : f.state.registry)
        if (p->trainable)
            p->value.array() += 0.05;  // simulated training movement
    StepOutput after = forward_step(f.state, img, 1);
    CHECK(before.class_logits == after.class_logits);
    CHECK(before.mask_logits == after.mask_logits);
}
