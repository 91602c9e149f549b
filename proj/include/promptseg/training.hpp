#pragma once

#include "promptseg/model.hpp"

#include <map>
#include <utility>
#include <vector>

namespace promptseg {

struct MatchWeights {
    double w_cls = 2.0;
    double w_bce = 5.0;
    double w_dice = 5.0;
    void validate() const;
};

struct TrainHyper {
    int iters_per_class = 1600;
    double iter_scale = 0.1;  // desk-scale multiplier on the per-class rule
    double lr_first = 1e-4;
    double lr_later = 5e-4;
    int batch_size = 8;
    double weight_decay = 1e-4;
    uint64_t seed = 0;
    void validate() const;
};

struct Assignment {
    std::vector<std::pair<int, int>> pairs;  // (query, target), query ascending
    std::vector<int> unmatched_queries;
};

// Per-image ground truth restricted to one step's classes, at mask resolution.
struct StepTargets {
    std::vector<int> local_class;  // index into C^t per target
    std::vector<Mat> masks;        // each 1 x h*w, soft (block-averaged) in [0,1]
};

StepTargets make_targets(const PanopticSample& sample,
                         const std::vector<int>& step_classes, int mask_h, int mask_w);

// ---- matching -------------------------------------------------------------

Mat match_cost(const StepOutput& output, const StepTargets& targets,
               const MatchWeights& weights);

// Min-cost one-to-one assignment of size min(N, M); among optima, the
// lexicographically smallest (query, target) pair list.
Assignment hungarian(const Mat& cost);

// ---- scalar losses (also the straight-line pieces used in match_cost) -----

double dice_loss(const Eigen::RowVectorXd& pred_probs, const Eigen::RowVectorXd& target);
double bce_mask_loss(const Eigen::RowVectorXd& pred_probs, const Eigen::RowVectorXd& target);
double bce_cls_loss(const Mat& pred_logits, const Assignment& assignment,
                    const StepTargets& targets, int num_classes);

// ---- optimization ---------------------------------------------------------

struct TrainLogEntry {
    int iter = 0;
    double loss = 0, loss_cls = 0, loss_bce = 0, loss_dice = 0;
    double lr = 0;
    int step = 0;
};

struct TrainOptions {
    // Naive fine-tuning: earlier prompt sets also forward on current data and
    // their queries are pushed toward the all-background class target.
    bool include_prior_sets = false;
    double clip_norm = 1.0;
    int max_iters_override = -1;  // >=0 replaces the per-class iteration rule
};

std::vector<TrainLogEntry> train_task(ModelState& state,
                                      const std::vector<PanopticSample>& step_dataset,
                                      int t, const TrainHyper& hyper,
                                      const MatchWeights& weights,
                                      const TrainOptions& options = {});

// Differentiable total loss for one image under a fixed assignment; returns
// the scalar node. Exposed for the gradient checker.
Val image_loss_g(ForwardGraph& g, const ModelState& state, const Mat& image,
                 const StepTargets& targets, int t, const Assignment& assignment,
                 const MatchWeights& weights);

// Analytic vs central-difference gradients over every trainable scalar.
double grad_check(const ModelState& state, const Mat& image, const StepTargets& targets,
                  int t, double epsilon, const MatchWeights& weights = {});

}  // namespace promptseg
