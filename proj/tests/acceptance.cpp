// Acceptance gate: one pass/fail line per shipped guarantee, exit 0 only if
// every line passes. Heavier end-to-end scenarios run last so the cheap
// structural checks report first.

#include "promptseg/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

using namespace promptseg;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int index, const std::string& name, bool ok, const std::string& detail) {
    std::printf("%s  %2d  %-34s %s\n", ok ? "PASS" : "FAIL", index, name.c_str(),
                detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ModelConfig micro_cfg() {
    ModelConfig cfg;
    cfg.image_height = 32;
    cfg.image_width = 32;
    cfg.mask_height = 8;
    cfg.mask_width = 8;
    cfg.embed_dim = 8;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.pixel_embed_dim = 8;
    cfg.mlp_hidden = 8;
    cfg.min_prompts = 4;
    return cfg;
}

SceneGenConfig micro_scene() {
    SceneGenConfig sc;
    sc.height = 32;
    sc.width = 32;
    sc.num_thing_classes = 4;
    sc.num_stuff_classes = 2;
    sc.seed = 17;
    return sc;
}

// The end-to-end fixture: 24 classes, 12-4 protocol (4 steps), tuned so the
// first step converges within the desk budget on one CPU core.
const char* kToyConfig = R"([dataset]
type = synthetic
image_size = 64
thing_classes = 18
stuff_classes = 6
seed = 9
train_images = 160
eval_images = 160

[protocol]
base = 12
increment = 4
ordering_seed = 1

[model]
seed = 1

[training]
lr_first = 0.0005
lr_later = 0.0005
iters_per_class = 450
iter_scale = 1.0
seed = 3

[inference]
delta = 0.5
min_segment_pixels = 160

[run]
method = eclipse
)";

// ---- 1: freeze invariance ---------------------------------------------------

void criterion_freeze() {
    auto t0 = std::chrono::steady_clock::now();
    SceneGenConfig sc = micro_scene();
    ClassCatalog cat = make_catalog(sc);
    TaskProtocol protocol = build_protocol(cat, 4, 2, ProtocolMode::overlap);
    ModelState state = init_model(micro_cfg(), cat, protocol, 1);
    auto data = generate_dataset(sc, 20);

    std::vector<StepOutput> before;
    for (const auto& s : data) before.push_back(forward_step(state, image_to_mat(s), 1));

    add_step(state, protocol.steps[1], 7);
    TrainHyper hyper;
    hyper.iters_per_class = 10;
    hyper.iter_scale = 1.0;
    hyper.batch_size = 2;
    train_task(state, step_view(data, protocol, 2), 2, hyper, {});

    double max_diff = 0;
    for (size_t i = 0; i < data.size(); ++i) {
        StepOutput after = forward_step(state, image_to_mat(data[i]), 1);
        max_diff = std::max(max_diff, (after.class_logits - before[i].class_logits)
                                          .cwiseAbs()
                                          .maxCoeff());
        max_diff = std::max(
            max_diff,
            (after.mask_logits - before[i].mask_logits).cwiseAbs().maxCoeff());
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "max |drift| = %.2e over 20 images (%.1fs)",
                  max_diff, seconds_since(t0));
    report(1, "freeze invariance", max_diff <= 1e-6, buf);
}

// ---- 2: trainable-parameter accounting --------------------------------------

void criterion_param_count() {
    auto head_params = [](const ModelConfig& cfg, long long c) {
        long long h = cfg.mlp_hidden, d = cfg.embed_dim, depth = cfg.mlp_depth;
        return d * h + h + (depth - 1) * (h * h + h) + h * c + c;
    };
    auto prompt_params = [](const ModelConfig& cfg, long long n) {
        long long blocks = cfg.prompt_mode == PromptMode::deep ? cfg.num_layers : 1;
        return blocks * n * cfg.embed_dim;
    };

    SceneGenConfig sc = micro_scene();
    sc.num_thing_classes = 9;
    sc.num_stuff_classes = 3;
    ClassCatalog cat = make_catalog(sc);
    TaskProtocol protocol = build_protocol(cat, 4, 4, ProtocolMode::overlap);

    bool ok = true;
    int checked = 0;
    for (int variant = 0; variant < 5 && ok; ++variant) {
        ModelConfig cfg = micro_cfg();
        if (variant == 1) cfg.num_layers = 3;
        if (variant == 2) cfg.prompt_mode = PromptMode::shallow;
        if (variant == 3) cfg.mlp_depth = 3;
        if (variant == 4) {
            cfg.embed_dim = 16;
            cfg.min_prompts = 6;
        }
        ModelState state = init_model(cfg, cat, protocol, 1);
        for (int t = 2; t <= protocol.num_steps(); ++t) {
            add_step(state, protocol.steps[t - 1], 100 + t);
            long long c = static_cast<long long>(protocol.steps[t - 1].size());
            long long n = prompt_count_for(static_cast<int>(c), cfg.min_prompts);
            long long want = prompt_params(cfg, n) + head_params(cfg, c);
            ok = ok && count_trainable(state) == want;
            ++checked;
        }
    }
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%d step/config combinations, exact", checked);
    report(2, "trainable-parameter accounting", ok, buf);
}

// ---- 3: gradient correctness ------------------------------------------------

void criterion_gradients() {
    auto t0 = std::chrono::steady_clock::now();
    SceneGenConfig sc = micro_scene();
    ClassCatalog cat = make_catalog(sc);
    TaskProtocol protocol = build_protocol(cat, 4, 2, ProtocolMode::overlap);
    ModelState state = init_model(micro_cfg(), cat, protocol, 1);
    auto data = generate_dataset(sc, 4);

    PanopticSample sample = step_view(data, protocol, 1).front();
    StepTargets targets =
        make_targets(sample, protocol.steps[0], state.cfg.mask_height,
                     state.cfg.mask_width);
    Mat img = image_to_mat(sample);
    double err1 = grad_check(state, img, targets, 1, 1e-5);

    add_step(state, protocol.steps[1], 7);
    PanopticSample s2 = step_view(data, protocol, 2).front();
    StepTargets t2 = make_targets(s2, protocol.steps[1], state.cfg.mask_height,
                                  state.cfg.mask_width);
    Mat img2 = image_to_mat(s2);
    double err2 = grad_check(state, img2, t2, 2, 1e-5);

    // frozen parameters: gradient storage must never materialize
    ForwardGraph g(true);
    StepOutput out = forward_step(state, img2, 2);
    Assignment a = hungarian(match_cost(out, t2, {}));
    Val loss = image_loss_g(g, state, img2, t2, 2, a, {});
    g.tape.backward(loss);
    bool frozen_zero = true;
    for (const auto& [param, val] : g.bindings())
        if (!param->trainable) frozen_zero = frozen_zero && g.tape.grad(val).size() == 0;

    char buf[128];
    std::snprintf(buf, sizeof(buf),
                  "max rel err %.2e (step1) %.2e (step2), frozen grads empty (%.1fs)",
                  err1, err2, seconds_since(t0));
    report(3, "gradient correctness", err1 < 1e-4 && err2 < 1e-4 && frozen_zero, buf);
}

// ---- 4: matching optimality -------------------------------------------------

Assignment brute_force(const Mat& cost) {
    const int n = static_cast<int>(cost.rows());
    const int m = static_cast<int>(cost.cols());
    const int k = std::min(n, m);
    Assignment best;
    double best_cost = 0;
    bool have = false;
    std::vector<bool> used_q(n, false), used_t(m, false);
    std::vector<int> qs, ts;
    std::function<void()> rec = [&]() {
        if (static_cast<int>(qs.size()) == k) {
            double c = 0;
            std::vector<std::pair<int, int>> pairs;
            for (int i = 0; i < k; ++i) {
                c += cost(qs[i], ts[i]);
                pairs.emplace_back(qs[i], ts[i]);
            }
            std::sort(pairs.begin(), pairs.end());
            if (!have || c < best_cost - 1e-12 ||
                (std::abs(c - best_cost) <= 1e-12 && pairs < best.pairs)) {
                have = true;
                best_cost = c;
                best.pairs = pairs;
            }
            return;
        }
        for (int q = 0; q < n; ++q) {
            if (used_q[q]) continue;
            for (int t = 0; t < m; ++t) {
                if (used_t[t]) continue;
                used_q[q] = used_t[t] = true;
                qs.push_back(q);
                ts.push_back(t);
                rec();
                qs.pop_back();
                ts.pop_back();
                used_q[q] = used_t[t] = false;
            }
        }
    };
    rec();
    std::vector<bool> matched(n, false);
    for (auto& [q, t] : best.pairs) matched[q] = true;
    for (int q = 0; q < n; ++q)
        if (!matched[q]) best.unmatched_queries.push_back(q);
    return best;
}

void criterion_matching() {
    Rng rng(23);
    bool ok = true;
    for (int trial = 0; trial < 100 && ok; ++trial) {
        int n = 1 + static_cast<int>(rng.below(7));
        int m = 1 + static_cast<int>(rng.below(7));
        Mat cost(n, m);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) cost(i, j) = rng.uniform(-2.0, 2.0);
        Assignment got = hungarian(cost);
        Assignment want = brute_force(cost);
        ok = ok && got.pairs == want.pairs &&
             got.unmatched_queries == want.unmatched_queries;
    }
    report(4, "matching optimality", ok, "100 random instances, N,M <= 7, exact");
}

// ---- 5: PQ oracle equivalence ----------------------------------------------

PanopticSample random_scene(Rng& rng, const ClassCatalog& cat) {
    PanopticSample s;
    s.height = 16;
    s.width = 16;
    s.image.assign(3 * 256, 0.0);
    s.segment_map.assign(256, 0);
    int n = 1 + static_cast<int>(rng.below(5));
    for (int k = 0; k < n; ++k) {
        int y0 = static_cast<int>(rng.below(13));
        int x0 = static_cast<int>(rng.below(13));
        int y1 = y0 + 2 + static_cast<int>(rng.below(14 - y0));
        int x1 = x0 + 2 + static_cast<int>(rng.below(14 - x0));
        int cls = 1 + static_cast<int>(rng.below(cat.size()));
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) s.seg(y, x) = k + 1;
        s.segments.push_back({k + 1, cls, true});
    }
    std::set<int> present;
    for (int v : s.segment_map)
        if (v) present.insert(v);
    std::erase_if(s.segments,
                  [&](const SegmentInfo& g) { return !present.count(g.segment_id); });
    return s;
}

PanopticPrediction as_prediction(const PanopticSample& s) {
    PanopticPrediction p;
    p.height = s.height;
    p.width = s.width;
    p.segment_map = s.segment_map;
    for (const auto& seg : s.segments)
        p.segments.push_back({seg.segment_id, seg.class_id, seg.is_thing, 1.0});
    return p;
}

void criterion_pq_oracle() {
    auto t0 = std::chrono::steady_clock::now();
    SceneGenConfig sc = micro_scene();
    ClassCatalog cat = make_catalog(sc);
    Rng rng(43);
    std::vector<PanopticSample> gts;
    std::vector<PanopticPrediction> preds;
    for (int i = 0; i < 200; ++i) {
        gts.push_back(random_scene(rng, cat));
        preds.push_back(as_prediction(random_scene(rng, cat)));
    }
    PQResult got = panoptic_quality(preds, gts, cat);

    // independent pixel-level oracle, every (pred, gt) pair checked directly
    std::map<int, ClassStats> want;
    for (size_t i = 0; i < preds.size(); ++i) {
        const auto& pred = preds[i];
        const auto& gt = gts[i];
        std::set<int> mp, mg;
        for (const auto& ps : pred.segments)
            for (const auto& gs : gt.segments) {
                if (ps.class_id != gs.class_id) continue;
                long long inter = 0, pa = 0, ga = 0, pv = 0;
                for (size_t p = 0; p < gt.segment_map.size(); ++p) {
                    bool ip = pred.segment_map[p] == ps.segment_id;
                    bool ig = gt.segment_map[p] == gs.segment_id;
                    pa += ip;
                    ga += ig;
                    inter += ip && ig;
                    pv += ip && gt.segment_map[p] == 0;
                }
                double iou = double(inter) / double(pa + ga - inter - pv);
                if (iou > 0.5) {
                    want[ps.class_id].iou_sum += iou;
                    want[ps.class_id].tp += 1;
                    mp.insert(ps.segment_id);
                    mg.insert(gs.segment_id);
                }
            }
        for (const auto& ps : pred.segments)
            if (!mp.count(ps.segment_id)) want[ps.class_id].fp += 1;
        for (const auto& gs : gt.segments)
            if (!mg.count(gs.segment_id)) want[gs.class_id].fn += 1;
    }
    bool ok = true;
    for (const auto& [cls, w] : want) {
        const auto& g = got.per_class.at(cls);
        ok = ok && g.tp == w.tp && g.fp == w.fp && g.fn == w.fn &&
             std::abs(g.iou_sum - w.iou_sum) < 1e-12;
    }
    for (const auto& [cls, st] : got.per_class)
        if (st.touched()) ok = ok && std::abs(st.pq() - st.sq() * st.rq()) < 1e-12;

    // perfect prediction scores exactly 1
    std::vector<PanopticPrediction> perfect;
    for (const auto& g : gts) perfect.push_back(as_prediction(g));
    PQResult p = panoptic_quality(perfect, gts, cat);
    ok = ok && p.groups.at("all").pq == 1.0;

    char buf[96];
    std::snprintf(buf, sizeof(buf),
                  "200 scenes vs pixel oracle, PQ=SQ*RQ, perfect=1.0 (%.1fs)",
                  seconds_since(t0));
    report(5, "PQ oracle equivalence", ok, buf);
}

// ---- 9: complexity additivity -----------------------------------------------

void criterion_complexity() {
    ModelConfig cfg = micro_cfg();
    SceneGenConfig sc = micro_scene();
    sc.num_thing_classes = 9;
    sc.num_stuff_classes = 3;
    ClassCatalog cat = make_catalog(sc);
    TaskProtocol protocol = build_protocol(cat, 4, 4, ProtocolMode::overlap);
    ModelState state = init_model(cfg, cat, protocol, 1);
    add_step(state, protocol.steps[1], 11);
    add_step(state, protocol.steps[2], 12);

    long long expect = 0, total_n = 0;
    for (const auto& ps : state.prompt_sets) {
        expect += attention_pairwise_cost(cfg, ps.n());
        total_n += ps.n();
    }
    long long got = attention_pairwise_ops(state, 3);
    long long pooled = attention_pairwise_cost(cfg, static_cast<int>(total_n));
    bool ok = got == expect && got < pooled &&
              attention_pairwise_cost(cfg, 7) ==
                  2LL * 7 * 7 * cfg.embed_dim * cfg.num_layers;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "sum_k f(N^k) = %lld < f(sum N^k) = %lld", got,
                  pooled);
    report(9, "complexity additivity", ok, buf);
}

// ---- 10: format fidelity ----------------------------------------------------

void criterion_format() {
    SceneGenConfig sc = micro_scene();
    sc.height = 64;
    sc.width = 64;
    sc.num_thing_classes = 6;
    sc.num_stuff_classes = 2;
    ClassCatalog cat = make_catalog(sc);
    auto data = generate_dataset(sc, 50);

    fs::path dir = fs::temp_directory_path() / "promptseg_acceptance_coco";
    fs::remove_all(dir);
    write_coco_panoptic(dir.string(), cat, data);
    auto [cat2, back] =
        read_coco_panoptic((dir / "annotations.json").string(), dir.string());
    bool ok = back.size() == data.size() && cat2.size() == cat.size();
    for (size_t i = 0; ok && i < data.size(); ++i) {
        ok = back[i].segment_map == data[i].segment_map &&
             back[i].segments.size() == data[i].segments.size();
        for (size_t j = 0; ok && j < data[i].segments.size(); ++j)
            ok = back[i].segments[j].segment_id == data[i].segments[j].segment_id &&
                 back[i].segments[j].class_id == data[i].segments[j].class_id &&
                 back[i].segments[j].is_thing == data[i].segments[j].is_thing;
    }
    fs::remove_all(dir);

    Rng rng(59);
    bool codec_ok = true;
    for (int i = 0; i < 10000 && codec_ok; ++i) {
        int id = 1 + static_cast<int>(rng.below(256 * 256 * 256 - 1));
        auto [r, g, b] = segment_id_to_rgb(id);
        codec_ok = rgb_to_segment_id(r, g, b) == id && r >= 0 && r < 256 && g >= 0 &&
                   g < 256 && b >= 0 && b < 256;
    }
    report(10, "format fidelity", ok && codec_ok,
           "50-sample round-trip lossless, codec bijective over 10^4 ids");
}

// ---- 6, 7, 8: end-to-end continual scenario ---------------------------------

void criteria_end_to_end() {
    auto t0 = std::chrono::steady_clock::now();
    fs::path work = fs::temp_directory_path() / "promptseg_acceptance_runs";
    fs::remove_all(work);

    ExperimentConfig eclipse = ExperimentConfig::from_string(kToyConfig);
    ExperimentConfig finetune = eclipse;
    finetune.run.method = Method::finetune;
    ExperimentConfig shallow = eclipse;
    shallow.model.cfg.prompt_mode = PromptMode::shallow;

    ReportBundle re = run_scenario(eclipse, (work / "eclipse").string());
    ReportBundle rf = run_scenario(finetune, (work / "finetune").string());

    auto pct = [](double f) { return f * 100.0; };
    double ft_base = pct(rf.final_pq.groups.at("base").pq);
    double ec_base = pct(re.final_pq.groups.at("base").pq);
    double ec_base_step1 = pct(re.per_step.front().pq.groups.at("base").pq);
    double ec_all = pct(re.final_pq.groups.at("all").pq);
    double ft_all = pct(rf.final_pq.groups.at("all").pq);

    bool ok6 = ft_base < 5.0 && std::abs(ec_base - ec_base_step1) <= 2.0 &&
               ec_all > ft_all;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "ft base %.1f<5; base %.1f vs step-1 %.1f (|d|<=2); all %.1f>%.1f "
                  "(%.0fs)",
                  ft_base, ec_base, ec_base_step1, ec_all, ft_all, seconds_since(t0));
    report(6, "continual scenario (12-4, T=4)", ok6, buf);

    auto t7 = std::chrono::steady_clock::now();
    auto rows = sweep_delta(eclipse, (work / "eclipse").string(), {0.0, 0.5});
    double gain = pct(rows[1].all_pq) - pct(rows[0].all_pq);
    std::snprintf(buf, sizeof(buf),
                  "all-PQ %.1f at d=0.5 vs %.1f at d=0, gain %.1f >= 1.0 (%.1fs)",
                  pct(rows[1].all_pq), pct(rows[0].all_pq), gain,
                  seconds_since(t7));
    report(7, "suppression strength behavior", gain >= 1.0, buf);

    ReportBundle rs = run_scenario(shallow, (work / "shallow").string());
    double deep_new = pct(re.final_pq.groups.at("new").pq);
    double shallow_new = pct(rs.final_pq.groups.at("new").pq);
    bool ok8 = deep_new >= shallow_new ||
               std::abs(deep_new - shallow_new) <= 0.5;
    std::snprintf(buf, sizeof(buf), "new-PQ deep %.1f vs shallow %.1f", deep_new,
                  shallow_new);
    report(8, "deep vs shallow prompting", ok8, buf);

    fs::remove_all(work);
}

}  // namespace

int main() {
    std::printf("acceptance gate, build %s\n", build_id().c_str());
    criterion_freeze();
    criterion_param_count();
    criterion_gradients();
    criterion_matching();
    criterion_pq_oracle();
    criterion_complexity();
    criterion_format();
    criteria_end_to_end();
    std::printf("%s (%d failure%s)\n", g_failures == 0 ? "ALL PASS" : "FAILURES",
                g_failures, g_failures == 1 ? "" : "s");
    return g_failures == 0 ? 0 : 1;
}
