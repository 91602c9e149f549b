#include "promptseg/inference.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

using json = nlohmann::json;

namespace promptseg {

void InferenceConfig::validate() const {
    if (delta < 0) throw ConfigError("delta must be non-negative");
    if (single_head_threshold <= 0 || single_head_threshold >= 1)
        throw ConfigError("single_head_threshold must be in (0,1)");
    if (min_segment_pixels < 0) throw ConfigError("min_segment_pixels must be >= 0");
}

ManipulatedLogits manipulate_logits(const std::vector<Mat>& blocks, int t,
                                    int num_heads_present, const InferenceConfig& cfg) {
    cfg.validate();
    if (static_cast<int>(blocks.size()) != num_heads_present)
        throw InputError("manipulate_logits: expected one block per existing head");
    if (t < 1 || t > num_heads_present) throw InputError("manipulate_logits: bad step");

    ManipulatedLogits out;
    out.own_probs = (1.0 / (1.0 + (-blocks[t - 1].array()).exp())).matrix();
    const int n = static_cast<int>(out.own_probs.rows());
    out.no_obj_scores = Eigen::VectorXd::Zero(n);
    if (num_heads_present == 1 || cfg.tau_rule_all) {
        out.no_obj_scores.setConstant(cfg.single_head_threshold);
        return out;
    }
    for (int k = 1; k <= num_heads_present; ++k) {
        if (k == t) continue;
        if (blocks[k - 1].rows() != n)
            throw InputError("manipulate_logits: block row mismatch");
        if (cfg.logit_sum)
            out.no_obj_scores += blocks[k - 1].rowwise().sum();
        else
            out.no_obj_scores +=
                (1.0 / (1.0 + (-blocks[k - 1].array()).exp())).matrix().rowwise().sum();
    }
    out.no_obj_scores *= cfg.delta;
    if (cfg.tau_floor)
        out.no_obj_scores = out.no_obj_scores.cwiseMax(cfg.single_head_threshold);
    return out;
}

std::vector<QueryDecision> decide(const Mat& own_probs,
                                  const Eigen::VectorXd& no_obj_scores,
                                  const std::vector<int>& global_classes, int step) {
    if (own_probs.rows() != no_obj_scores.size())
        throw InputError("decide: shape mismatch");
    if (own_probs.cols() != static_cast<Eigen::Index>(global_classes.size()))
        throw InputError("decide: class list mismatch");
    std::vector<QueryDecision> out;
    for (Eigen::Index q = 0; q < own_probs.rows(); ++q) {
        QueryDecision d;
        d.step = step;
        d.query = static_cast<int>(q);
        Eigen::Index best = 0;
        double best_p = own_probs.row(q).maxCoeff(&best);
        if (no_obj_scores(q) >= best_p) {  // ties suppress
            d.class_id = kNoObj;
            d.score = 0;
        } else {
            d.class_id = global_classes[best];
            d.score = best_p;
        }
        out.push_back(std::move(d));
    }
    return out;
}

namespace {

// nearest-neighbour upsample of a mask row to image resolution
Eigen::RowVectorXd upsample_mask(const Eigen::RowVectorXd& m, int mask_h, int mask_w,
                                 int image_h, int image_w) {
    Eigen::RowVectorXd out(static_cast<Eigen::Index>(image_h) * image_w);
    const int sy = image_h / mask_h, sx = image_w / mask_w;
    for (int y = 0; y < image_h; ++y)
        for (int x = 0; x < image_w; ++x)
            out(y * image_w + x) = m((y / sy) * mask_w + x / sx);
    return out;
}

std::vector<int> sort_by_score(const std::vector<QueryDecision>& decisions) {
    std::vector<int> order;
    for (size_t i = 0; i < decisions.size(); ++i)
        if (decisions[i].class_id != kNoObj) order.push_back(static_cast<int>(i));
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return decisions[a].score > decisions[b].score;
    });
    return order;
}

}  // namespace

PanopticPrediction panoptic_merge(const std::vector<QueryDecision>& decisions,
                                  const InferenceConfig& cfg, const ClassCatalog& catalog,
                                  int image_h, int image_w, int mask_h, int mask_w) {
    cfg.validate();
    PanopticPrediction pred;
    pred.height = image_h;
    pred.width = image_w;
    pred.segment_map.assign(static_cast<size_t>(image_h) * image_w, 0);

    std::vector<int> order = sort_by_score(decisions);
    struct Claim {
        int decision_index;
        std::vector<int> pixels;
    };
    std::vector<Claim> claims;
    std::vector<char> taken(pred.segment_map.size(), 0);
    for (int idx : order) {
        const auto& d = decisions[idx];
        Eigen::RowVectorXd probs =
            upsample_mask(d.mask_probs, mask_h, mask_w, image_h, image_w);
        Claim c{idx, {}};
        for (Eigen::Index p = 0; p < probs.size(); ++p)
            if (!taken[p] && probs(p) > 0.5) {
                taken[p] = 1;
                c.pixels.push_back(static_cast<int>(p));
            }
        if (static_cast<int>(c.pixels.size()) > cfg.min_segment_pixels &&
            !c.pixels.empty())
            claims.push_back(std::move(c));
        else
            for (int p : c.pixels) taken[p] = 0;  // release undersized claims
    }

    std::map<int, int> stuff_segment;  // class -> segment id
    int next_id = 1;
    for (const auto& c : claims) {
        const auto& d = decisions[c.decision_index];
        const bool is_thing = catalog.is_thing(d.class_id);
        int seg_id;
        if (!is_thing && stuff_segment.count(d.class_id)) {
            seg_id = stuff_segment[d.class_id];
            for (auto& s : pred.segments)
                if (s.segment_id == seg_id) s.score = std::max(s.score, d.score);
        } else {
            seg_id = next_id++;
            if (!is_thing) stuff_segment[d.class_id] = seg_id;
            pred.segments.push_back({seg_id, d.class_id, is_thing, d.score});
        }
        for (int p : c.pixels) pred.segment_map[p] = seg_id;
    }
    return pred;
}

std::vector<int> semantic_merge(const std::vector<QueryDecision>& decisions,
                                const InferenceConfig& cfg, int num_classes,
                                int image_h, int image_w, int mask_h, int mask_w) {
    cfg.validate();
    const size_t npix = static_cast<size_t>(image_h) * image_w;
    Mat score = Mat::Zero(num_classes + 1, npix);
    for (const auto& d : decisions) {
        if (d.class_id == kNoObj) continue;
        Eigen::RowVectorXd probs =
            upsample_mask(d.mask_probs, mask_h, mask_w, image_h, image_w);
        score.row(d.class_id) += d.score * probs;
    }
    std::vector<int> out(npix, 0);
    for (size_t p = 0; p < npix; ++p) {
        double total = score.col(p).sum();
        if (total < cfg.single_head_threshold) continue;
        Eigen::Index best = 0;
        score.col(p).maxCoeff(&best);
        out[p] = static_cast<int>(best);
    }
    return out;
}

std::vector<QueryDecision> evaluate_image(const ModelState& state, const Mat& image,
                                          int upto, const InferenceConfig& cfg) {
    std::vector<int> all_heads(upto);
    for (int k = 0; k < upto; ++k) all_heads[k] = k + 1;
    std::vector<StepOutput> outputs = forward_all(state, image, upto);
    std::vector<QueryDecision> decisions;
    for (int t = 1; t <= upto; ++t) {
        const StepOutput& out = outputs[t - 1];
        std::vector<Mat> blocks = apply_heads(state, out.decoder_embeddings, all_heads);
        ManipulatedLogits ml = manipulate_logits(blocks, t, upto, cfg);
        auto ds = decide(ml.own_probs, ml.no_obj_scores,
                         state.prompt_sets[t - 1].local_classes, t);
        Mat mask_probs = (1.0 / (1.0 + (-out.mask_logits.array()).exp())).matrix();
        for (auto& d : ds) d.mask_probs = mask_probs.row(d.query);
        decisions.insert(decisions.end(), ds.begin(), ds.end());
    }
    return decisions;
}

// ---- sidecars -------------------------------------------------------------

std::vector<QuerySidecar> make_sidecar(const ModelState& state, const Mat& image,
                                       int upto, const InferenceConfig& cfg) {
    (void)cfg;
    std::vector<int> all_heads(upto);
    for (int k = 0; k < upto; ++k) all_heads[k] = k + 1;
    std::vector<StepOutput> outputs = forward_all(state, image, upto);
    std::vector<QuerySidecar> sc;
    for (int t = 1; t <= upto; ++t) {
        const StepOutput& out = outputs[t - 1];
        std::vector<Mat> blocks = apply_heads(state, out.decoder_embeddings, all_heads);
        Mat own = (1.0 / (1.0 + (-blocks[t - 1].array()).exp())).matrix();
        Mat mask_probs = (1.0 / (1.0 + (-out.mask_logits.array()).exp())).matrix();
        for (Eigen::Index q = 0; q < own.rows(); ++q) {
            QuerySidecar s;
            s.step = t;
            s.query = static_cast<int>(q);
            for (Eigen::Index c = 0; c < own.cols(); ++c) s.own_probs.push_back(own(q, c));
            for (int k = 1; k <= upto; ++k) {
                if (k == t) continue;
                s.other_logit_sum += blocks[k - 1].row(q).sum();
                s.other_prob_sum +=
                    (1.0 / (1.0 + (-blocks[k - 1].row(q).array()).exp())).sum();
            }
            for (Eigen::Index p = 0; p < mask_probs.cols(); ++p)
                s.mask_probs.push_back(mask_probs(q, p));
            sc.push_back(std::move(s));
        }
    }
    return sc;
}

std::vector<QueryDecision> decisions_from_sidecar(
    const std::vector<QuerySidecar>& sc,
    const std::vector<std::vector<int>>& step_classes, int heads_present,
    const InferenceConfig& cfg) {
    cfg.validate();
    std::vector<QueryDecision> out;
    for (const auto& s : sc) {
        QueryDecision d;
        d.step = s.step;
        d.query = s.query;
        double no_obj;
        if (heads_present == 1 || cfg.tau_rule_all)
            no_obj = cfg.single_head_threshold;
        else {
            no_obj = cfg.delta * (cfg.logit_sum ? s.other_logit_sum : s.other_prob_sum);
            if (cfg.tau_floor) no_obj = std::max(no_obj, cfg.single_head_threshold);
        }
        int best = 0;
        double best_p = -1;
        for (size_t c = 0; c < s.own_probs.size(); ++c)
            if (s.own_probs[c] > best_p) {
                best_p = s.own_probs[c];
                best = static_cast<int>(c);
            }
        if (no_obj >= best_p) {
            d.class_id = kNoObj;
            d.score = 0;
        } else {
            d.class_id = step_classes[s.step - 1][best];
            d.score = best_p;
        }
        d.mask_probs = Eigen::Map<const Eigen::RowVectorXd>(
            s.mask_probs.data(), static_cast<Eigen::Index>(s.mask_probs.size()));
        out.push_back(std::move(d));
    }
    return out;
}

void write_sidecar(const std::string& path, const std::vector<QuerySidecar>& sc) {
    json root = json::array();
    for (const auto& s : sc)
        root.push_back({{"step", s.step},
                        {"query", s.query},
                        {"own_probs", s.own_probs},
                        {"other_prob_sum", s.other_prob_sum},
                        {"other_logit_sum", s.other_logit_sum},
                        {"mask_probs", s.mask_probs}});
    std::ofstream f(path);
    f << root.dump();
}

std::vector<QuerySidecar> read_sidecar(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open sidecar " + path);
    json root;
    f >> root;
    std::vector<QuerySidecar> sc;
    for (const auto& j : root) {
        QuerySidecar s;
        s.step = j.at("step").get<int>();
        s.query = j.at("query").get<int>();
        s.own_probs = j.at("own_probs").get<std::vector<double>>();
        s.other_prob_sum = j.at("other_prob_sum").get<double>();
        s.other_logit_sum = j.at("other_logit_sum").get<double>();
        s.mask_probs = j.at("mask_probs").get<std::vector<double>>();
        sc.push_back(std::move(s));
    }
    return sc;
}

}  // namespace promptseg
