#pragma once

#include "promptseg/model.hpp"

#include <string>
#include <vector>

namespace promptseg {

// class_id value meaning "no object"
inline constexpr int kNoObj = 0;

struct InferenceConfig {
    double delta = 0.5;                 // modulation of the manipulated no-obj score
    double single_head_threshold = 0.5; // tau, used when only one head exists
    int min_segment_pixels = 0;
    bool logit_sum = false;  // sum raw logits instead of sigmoid probabilities
    // Disable manipulation entirely: every head uses the fixed tau threshold.
    bool tau_rule_all = false;
    // Floor the manipulated no-obj score at tau, so cross-head suppression can
    // only tighten the single-head rule, never loosen it.
    bool tau_floor = false;
    void validate() const;
};

struct QueryDecision {
    int step = 0;
    int query = 0;
    int class_id = kNoObj;  // global id, or kNoObj
    double score = 0;       // winning class probability when class_id != kNoObj
    Eigen::RowVectorXd mask_probs;  // h*w
};

struct PredSegment {
    int segment_id = 0;
    int class_id = 0;
    bool is_thing = false;
    double score = 0;
};

struct PanopticPrediction {
    int height = 0;
    int width = 0;
    std::vector<int> segment_map;  // H*W, 0 = void
    std::vector<PredSegment> segments;
};

struct ManipulatedLogits {
    Eigen::VectorXd no_obj_scores;  // N^t
    Mat own_probs;                  // N^t x |C^t|
};

// blocks: apply_heads() output for prompt set t, covering every existing head.
ManipulatedLogits manipulate_logits(const std::vector<Mat>& blocks, int t,
                                    int num_heads_present, const InferenceConfig& cfg);

std::vector<QueryDecision> decide(const Mat& own_probs,
                                  const Eigen::VectorXd& no_obj_scores,
                                  const std::vector<int>& global_classes, int step);

PanopticPrediction panoptic_merge(const std::vector<QueryDecision>& decisions,
                                  const InferenceConfig& cfg, const ClassCatalog& catalog,
                                  int image_h, int image_w, int mask_h, int mask_w);

// Per-pixel class map (H*W, row-major, 0 = void).
std::vector<int> semantic_merge(const std::vector<QueryDecision>& decisions,
                                const InferenceConfig& cfg, int num_classes,
                                int image_h, int image_w, int mask_h, int mask_w);

// Full per-image pipeline: forward_all + cross-head evaluation + logit
// manipulation + decision, masks attached.
std::vector<QueryDecision> evaluate_image(const ModelState& state, const Mat& image,
                                          int upto, const InferenceConfig& cfg);

// ---- sidecars: delta re-sweeps without re-running the network -------------

struct QuerySidecar {
    int step = 0;
    int query = 0;
    std::vector<double> own_probs;
    double other_prob_sum = 0;   // sum over sigmoid probs of all other-step classes
    double other_logit_sum = 0;
    std::vector<double> mask_probs;
};

std::vector<QuerySidecar> make_sidecar(const ModelState& state, const Mat& image,
                                       int upto, const InferenceConfig& cfg);
std::vector<QueryDecision> decisions_from_sidecar(const std::vector<QuerySidecar>& sc,
                                                  const std::vector<std::vector<int>>& step_classes,
                                                  int heads_present,
                                                  const InferenceConfig& cfg);

void write_sidecar(const std::string& path, const std::vector<QuerySidecar>& sc);
std::vector<QuerySidecar> read_sidecar(const std::string& path);

}  // namespace promptseg
