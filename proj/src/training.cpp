#include "promptseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace promptseg {

void MatchWeights::validate() const {
    if (w_cls < 0 || w_bce < 0 || w_dice < 0)
        throw ConfigError("match weights must be non-negative");
    if (w_cls == 0 && w_bce == 0 && w_dice == 0)
        throw ConfigError("match weights must not all be zero");
}

void TrainHyper::validate() const {
    if (iters_per_class <= 0 || iter_scale <= 0 || lr_first <= 0 || lr_later <= 0 ||
        batch_size <= 0 || weight_decay < 0)
        throw ConfigError("train hyperparameters must be positive");
}

StepTargets make_targets(const PanopticSample& sample,
                         const std::vector<int>& step_classes, int mask_h, int mask_w) {
    const int sy = sample.height / mask_h, sx = sample.width / mask_w;
    StepTargets t;
    for (const auto& seg : sample.segments) {
        auto it = std::find(step_classes.begin(), step_classes.end(), seg.class_id);
        if (it == step_classes.end()) continue;
        Mat mask = Mat::Zero(1, static_cast<Eigen::Index>(mask_h) * mask_w);
        for (int y = 0; y < sample.height; ++y)
            for (int x = 0; x < sample.width; ++x)
                if (sample.seg(y, x) == seg.segment_id)
                    mask(0, (y / sy) * mask_w + x / sx) += 1.0;
        mask /= static_cast<double>(sy * sx);
        t.local_class.push_back(static_cast<int>(it - step_classes.begin()));
        t.masks.push_back(std::move(mask));
    }
    return t;
}

// ---- scalar losses --------------------------------------------------------

namespace {
constexpr double kProbEps = 1e-12;

double bce_probs(double p, double g) {
    p = std::clamp(p, kProbEps, 1.0 - kProbEps);
    return -(g * std::log(p) + (1.0 - g) * std::log(1.0 - p));
}
}  // namespace

double dice_loss(const Eigen::RowVectorXd& p, const Eigen::RowVectorXd& g) {
    if (p.size() != g.size()) throw InputError("dice_loss: size mismatch");
    const double eps = 1.0;
    double inter = p.cwiseProduct(g).sum();
    return 1.0 - (2.0 * inter + eps) / (p.sum() + g.sum() + eps);
}

double bce_mask_loss(const Eigen::RowVectorXd& p, const Eigen::RowVectorXd& g) {
    if (p.size() != g.size()) throw InputError("bce_mask_loss: size mismatch");
    double acc = 0;
    for (Eigen::Index i = 0; i < p.size(); ++i) acc += bce_probs(p(i), g(i));
    return acc / static_cast<double>(p.size());
}

double bce_cls_loss(const Mat& logits, const Assignment& assignment,
                    const StepTargets& targets, int num_classes) {
    Mat target = Mat::Zero(logits.rows(), num_classes);
    for (auto [q, j] : assignment.pairs) target(q, targets.local_class[j]) = 1.0;
    const auto z = logits.array();
    // summed over classes, averaged over queries: the per-positive gradient
    // does not shrink as the step's class count grows
    return (z.max(0.0) - z * target.array() + (1.0 + (-z.abs()).exp()).log()).sum() /
           static_cast<double>(logits.rows());
}

// ---- matching -------------------------------------------------------------

Mat match_cost(const StepOutput& output, const StepTargets& targets,
               const MatchWeights& w) {
    w.validate();
    if (!output.class_logits.allFinite() || !output.mask_logits.allFinite())
        throw NumericalError("match_cost: NaN/inf in model output");
    const int n = static_cast<int>(output.class_logits.rows());
    const int c = static_cast<int>(output.class_logits.cols());
    const int m = static_cast<int>(targets.masks.size());
    Mat probs = (1.0 / (1.0 + (-output.class_logits.array()).exp())).matrix();
    Mat mask_probs = (1.0 / (1.0 + (-output.mask_logits.array()).exp())).matrix();

    Mat cost(n, m);
    for (int j = 0; j < m; ++j) {
        Eigen::RowVectorXd g = targets.masks[j].row(0);
        for (int q = 0; q < n; ++q) {
            double cls = 0;
            for (int k = 0; k < c; ++k)
                cls += bce_probs(probs(q, k), k == targets.local_class[j] ? 1.0 : 0.0);
            cls /= c;
            Eigen::RowVectorXd p = mask_probs.row(q);
            cost(q, j) = w.w_cls * cls + w.w_bce * bce_mask_loss(p, g) +
                         w.w_dice * dice_loss(p, g);
        }
    }
    return cost;
}

namespace {

// Jonker-Volgenant shortest augmenting path; needs rows <= cols.
double jv_min_cost(const Mat& a) {
    const int n = static_cast<int>(a.rows()), m = static_cast<int>(a.cols());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0), v(m + 1, 0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = -1;
            double delta = inf;
            for (int j = 1; j <= m; ++j)
                if (!used[j]) {
                    double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if (cur < minv[j]) { minv[j] = cur; way[j] = j0; }
                    if (minv[j] < delta) { delta = minv[j]; j1 = j; }
                }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) { u[p[j]] += delta; v[j] -= delta; }
                else minv[j] -= delta;
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    double total = 0;
    for (int j = 1; j <= m; ++j)
        if (p[j]) total += a(p[j] - 1, j - 1);
    return total;
}

double min_assignment_cost(const Mat& a) {
    if (a.rows() == 0 || a.cols() == 0) return 0.0;
    if (a.rows() <= a.cols()) return jv_min_cost(a);
    return jv_min_cost(a.transpose());
}

Mat submatrix(const Mat& a, const std::vector<int>& rows, const std::vector<int>& cols) {
    Mat s(rows.size(), cols.size());
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < cols.size(); ++j) s(i, j) = a(rows[i], cols[j]);
    return s;
}

}  // namespace

Assignment hungarian(const Mat& cost) {
    const int n = static_cast<int>(cost.rows()), m = static_cast<int>(cost.cols());
    Assignment out;
    if (m == 0) {
        for (int q = 0; q < n; ++q) out.unmatched_queries.push_back(q);
        return out;
    }
    if (!cost.allFinite()) throw NumericalError("hungarian: non-finite cost");

    const double best = min_assignment_cost(cost);
    const double tol = 1e-9 * std::max(1.0, std::abs(best));

    // fix pairs greedily in (query, target) order, keeping global optimality
    std::vector<char> tgt_used(m, 0);
    double fixed = 0;
    for (int q = 0; q < n; ++q) {
        std::vector<int> later_q;
        for (int r = q + 1; r < n; ++r) later_q.push_back(r);
        std::vector<int> free_t;
        for (int j = 0; j < m; ++j)
            if (!tgt_used[j]) free_t.push_back(j);
        if (free_t.empty()) {
            out.unmatched_queries.push_back(q);
            continue;
        }
        bool matched = false;
        for (int j : free_t) {
            std::vector<int> rest_t;
            for (int jj : free_t)
                if (jj != j) rest_t.push_back(jj);
            double total =
                fixed + cost(q, j) + min_assignment_cost(submatrix(cost, later_q, rest_t));
            if (total <= best + tol) {
                out.pairs.emplace_back(q, j);
                tgt_used[j] = 1;
                fixed += cost(q, j);
                matched = true;
                break;
            }
        }
        if (!matched) out.unmatched_queries.push_back(q);
    }
    return out;
}

// ---- differentiable loss --------------------------------------------------

namespace {

struct LossParts {
    Val total, cls, bce, dice;
};

LossParts build_image_loss(ForwardGraph& g, const StepOutputG& out,
                           const StepTargets& targets, const Assignment& assignment,
                           const MatchWeights& w, int num_classes) {
    Tape& t = g.tape;
    const int n = static_cast<int>(t.value(out.class_logits).rows());

    Mat cls_target = Mat::Zero(n, num_classes);
    for (auto [q, j] : assignment.pairs) cls_target(q, targets.local_class[j]) = 1.0;
    LossParts parts;
    // class-sum / query-mean normalization, matching bce_cls_loss
    parts.cls = t.scale(t.bce_logits_mean(out.class_logits, cls_target),
                        static_cast<double>(num_classes));
    parts.total = t.scale(parts.cls, w.w_cls);

    if (!assignment.pairs.empty()) {
        const double inv = 1.0 / static_cast<double>(assignment.pairs.size());
        Val bce_acc, dice_acc;
        for (auto [q, j] : assignment.pairs) {
            Val row = t.slice_rows(out.mask_logits, q, 1);
            Val b = t.bce_logits_mean(row, targets.masks[j]);
            bce_acc = bce_acc.valid() ? t.add(bce_acc, b) : b;

            Val p = t.sigmoid(row);
            Val inter = t.sum(t.mul(p, t.constant(targets.masks[j])));
            Val numer = t.affine(inter, 2.0, 1.0);
            Val denom = t.affine(t.sum(p), 1.0, targets.masks[j].sum() + 1.0);
            Val d = t.affine(t.div(numer, denom), -1.0, 1.0);
            dice_acc = dice_acc.valid() ? t.add(dice_acc, d) : d;
        }
        parts.bce = t.scale(bce_acc, inv);
        parts.dice = t.scale(dice_acc, inv);
        parts.total = t.add(parts.total,
                            t.add(t.scale(parts.bce, w.w_bce), t.scale(parts.dice, w.w_dice)));
    }
    return parts;
}

}  // namespace

Val image_loss_g(ForwardGraph& g, const ModelState& state, const Mat& image,
                 const StepTargets& targets, int t, const Assignment& assignment,
                 const MatchWeights& weights) {
    EncodedG enc = encode_g(g, state, image);
    StepOutputG out = forward_step_g(g, state, enc, t);
    const int c = static_cast<int>(state.prompt_sets[t - 1].local_classes.size());
    return build_image_loss(g, out, targets, assignment, weights, c).total;
}

// ---- optimizer ------------------------------------------------------------

namespace {

class AdamW {
  public:
    explicit AdamW(double weight_decay) : weight_decay_(weight_decay) {}

    void step(std::vector<std::pair<Param*, Mat>>& grads, double lr, double clip_norm) {
        double sq = 0;
        for (auto& [p, grad] : grads) sq += grad.squaredNorm();
        double norm = std::sqrt(sq);
        double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (auto& [p, grad] : grads) {
            grad *= scale;
            auto& [m, v] = mv_[p];
            if (m.size() == 0) {
                m = Mat::Zero(grad.rows(), grad.cols());
                v = Mat::Zero(grad.rows(), grad.cols());
            }
            m = beta1_ * m + (1.0 - beta1_) * grad;
            v = beta2_ * v + (1.0 - beta2_) * grad.cwiseProduct(grad);
            Mat mhat = m / bc1;
            Mat vhat = v / bc2;
            p->value.array() -= lr * (mhat.array() / (vhat.array().sqrt() + eps_) +
                                      weight_decay_ * p->value.array());
        }
    }

  private:
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    double weight_decay_;
    int t_ = 0;
    std::map<Param*, std::pair<Mat, Mat>> mv_;
};

}  // namespace

std::vector<TrainLogEntry> train_task(ModelState& state,
                                      const std::vector<PanopticSample>& step_dataset,
                                      int t, const TrainHyper& hyper,
                                      const MatchWeights& weights,
                                      const TrainOptions& options) {
    hyper.validate();
    weights.validate();
    if (t < 1 || t > state.num_steps()) throw StateError("train_task: unknown step");
    if (step_dataset.empty()) throw ProtocolError("train_task: empty step dataset");

    const auto& classes = state.prompt_sets[t - 1].local_classes;
    long iters = options.max_iters_override >= 0
                     ? options.max_iters_override
                     : std::lround(hyper.iters_per_class * hyper.iter_scale *
                                   static_cast<double>(classes.size()));
    const double lr = (t == 1) ? hyper.lr_first : hyper.lr_later;

    std::vector<StepTargets> targets;
    targets.reserve(step_dataset.size());
    for (const auto& s : step_dataset)
        targets.push_back(
            make_targets(s, classes, state.cfg.mask_height, state.cfg.mask_width));
    std::vector<Mat> images;
    images.reserve(step_dataset.size());
    for (const auto& s : step_dataset) images.push_back(image_to_mat(s));

    Rng rng(Rng::mix(hyper.seed, static_cast<uint64_t>(t)));
    AdamW opt(hyper.weight_decay);
    std::vector<TrainLogEntry> log;

    for (long it = 0; it < iters; ++it) {
        ForwardGraph g(true);
        Tape& tape = g.tape;
        Val total;
        double log_cls = 0, log_bce = 0, log_dice = 0;
        for (int b = 0; b < hyper.batch_size; ++b) {
            size_t idx = rng.below(step_dataset.size());
            EncodedG enc = encode_g(g, state, images[idx]);
            StepOutputG out = forward_step_g(g, state, enc, t);
            StepOutput vals{tape.value(out.class_logits), tape.value(out.mask_logits),
                            tape.value(out.decoder_embeddings)};
            Assignment as = hungarian(match_cost(vals, targets[idx], weights));
            LossParts parts = build_image_loss(g, out, targets[idx], as, weights,
                                               static_cast<int>(classes.size()));
            Val img_total = parts.total;
            if (options.include_prior_sets) {
                for (int k = 1; k < t; ++k) {
                    StepOutputG prior = forward_step_g(g, state, enc, k);
                    const Mat& logits = tape.value(prior.class_logits);
                    Mat zeros = Mat::Zero(logits.rows(), logits.cols());
                    img_total = tape.add(
                        img_total,
                        tape.scale(tape.bce_logits_mean(prior.class_logits, zeros),
                                   weights.w_cls * static_cast<double>(logits.cols())));
                }
            }
            total = total.valid() ? tape.add(total, img_total) : img_total;
            log_cls += tape.value(parts.cls)(0, 0);
            if (parts.bce.valid()) {
                log_bce += tape.value(parts.bce)(0, 0);
                log_dice += tape.value(parts.dice)(0, 0);
            }
        }
        total = tape.scale(total, 1.0 / hyper.batch_size);
        tape.backward(total);

        std::vector<std::pair<Param*, Mat>> grads;
        for (const auto& [param, val] : g.bindings()) {
            if (!param->trainable) continue;
            const Mat& grad = tape.grad(val);
            if (grad.size() == 0)
                grads.emplace_back(param, Mat::Zero(param->value.rows(), param->value.cols()));
            else
                grads.emplace_back(param, grad);
        }
        opt.step(grads, lr, options.clip_norm);

        TrainLogEntry e;
        e.iter = static_cast<int>(it);
        e.loss = tape.value(total)(0, 0);
        e.loss_cls = log_cls / hyper.batch_size;
        e.loss_bce = log_bce / hyper.batch_size;
        e.loss_dice = log_dice / hyper.batch_size;
        e.lr = lr;
        e.step = t;
        log.push_back(e);
    }
    return log;
}

// ---- gradient check -------------------------------------------------------

double grad_check(const ModelState& state, const Mat& image, const StepTargets& targets,
                  int t, double epsilon, const MatchWeights& weights) {
    // fix the assignment at the unperturbed point; matching is piecewise
    // constant and must not flip inside the finite-difference stencil
    StepOutput base = forward_step(state, image, t);
    Assignment as = hungarian(match_cost(base, targets, weights));

    ForwardGraph g(true);
    Val loss = image_loss_g(g, state, image, targets, t, as, weights);
    g.tape.backward(loss);

    ModelState probe = state.clone();
    auto loss_value = [&]() {
        ForwardGraph gg(false);
        Val l = image_loss_g(gg, probe, image, targets, t, as, weights);
        return gg.tape.value(l)(0, 0);
    };

    double max_err = 0;
    for (size_t pi = 0; pi < state.registry.size(); ++pi) {
        const ParamPtr& p = state.registry[pi];
        if (!p->trainable) continue;
        Mat analytic = Mat::Zero(p->value.rows(), p->value.cols());
        for (const auto& [param, val] : g.bindings())
            if (param == p.get() && g.tape.grad(val).size() != 0)
                analytic = g.tape.grad(val);
        Mat& target = probe.registry[pi]->value;
        for (Eigen::Index i = 0; i < target.size(); ++i) {
            const double saved = target(i);
            target(i) = saved + epsilon;
            double up = loss_value();
            target(i) = saved - epsilon;
            double down = loss_value();
            target(i) = saved;
            double numeric = (up - down) / (2.0 * epsilon);
            double err = std::abs(analytic(i) - numeric) /
                         std::max(std::abs(analytic(i)) + std::abs(numeric), 1e-3);
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace promptseg
