#pragma once

#include "promptseg/checkpoint.hpp"
#include "promptseg/inference.hpp"
#include "promptseg/metrics.hpp"
#include "promptseg/training.hpp"

#include <optional>
#include <string>
#include <vector>

namespace promptseg {

// Build identifier stamped into every emitted artifact.
std::string build_id();

enum class DatasetKind { synthetic, coco };
enum class Method { eclipse, finetune };

struct DatasetSection {
    DatasetKind kind = DatasetKind::synthetic;
    SceneGenConfig scene;  // image size, class counts, generator seed
    int train_images = 2000;
    int eval_images = 400;
    std::string cache_dir;  // optional native cache location
    std::string coco_train_annotations, coco_train_images;
    std::string coco_eval_annotations, coco_eval_images;
};

struct ProtocolSection {
    int base = 12;
    int increment = 4;
    ProtocolMode mode = ProtocolMode::overlap;
    std::optional<uint64_t> ordering_seed;  // absent: catalog order
    std::vector<int> order;  // explicit class ordering; exclusive with the seed
};

struct ModelSection {
    ModelConfig cfg;  // image/mask sizes are filled in from the dataset section
    uint64_t seed = 1;
};

struct TrainingSection {
    TrainHyper hyper;
    MatchWeights weights;
};

struct RunSection {
    Method method = Method::eclipse;
    bool eval_miou = false;
};

struct ExperimentConfig {
    DatasetSection dataset;
    ProtocolSection protocol;
    ModelSection model;
    TrainingSection training;
    InferenceConfig inference;
    RunSection run;

    void validate() const;
    // Normalized key=value rendering; equal configs render identically.
    std::string canonical() const;
    std::string hash() const;

    static ExperimentConfig from_string(const std::string& text);
    static ExperimentConfig from_file(const std::string& path);
};

struct LoadedData {
    ClassCatalog catalog;
    std::vector<PanopticSample> train;
    std::vector<PanopticSample> eval;
};

LoadedData load_data(const ExperimentConfig& cfg);

struct StepReport {
    int step = 0;
    PQResult pq;
};

struct ReportBundle {
    std::string config_hash;
    std::string run_dir;
    std::vector<StepReport> per_step;  // evaluated over classes seen so far
    PQResult final_pq;
    std::optional<MIoUResult> final_miou;
};

// Full continual scenario: per-step training, checkpointing and evaluation.
// Refuses to touch a run directory holding checkpoints of a different config.
// With resume=true, completed steps are loaded instead of retrained.
ReportBundle run_scenario(const ExperimentConfig& cfg, const std::string& run_dir,
                          bool resume = false);

// Evaluation only, from the final checkpoint in run_dir.
ReportBundle evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& run_dir);

struct DeltaRow {
    double delta = 0;
    double base_pq = 0, new_pq = 0, all_pq = 0;
};

// Re-scores cached per-query sidecars under different suppression strengths;
// no network evaluation happens.
std::vector<DeltaRow> sweep_delta(const ExperimentConfig& cfg, const std::string& run_dir,
                                  const std::vector<double>& deltas);

struct OrderingRow {
    uint64_t seed = 0;
    double base_pq = 0, new_pq = 0, all_pq = 0;
};

struct OrderingSummary {
    std::vector<OrderingRow> rows;
    double q1 = 0, median = 0, q3 = 0;  // over all-class PQ
};

OrderingSummary sweep_orderings(const ExperimentConfig& cfg, const std::string& out_dir,
                                int n_orderings, bool resume = false);

// Linear-interpolation quantile of an unsorted sample, q in [0,1].
double quantile(std::vector<double> values, double q);

struct AblateSwitches {
    bool shallow = false;
    bool no_logit_manipulation = false;
    bool prompt_counts = false;
    std::vector<int> prompt_floors = {20, 40};
};

struct AblationRow {
    std::string name;
    double base_pq = 0, new_pq = 0, all_pq = 0;
    long long trainable_last_step = 0;  // trainable scalars at the final step
    long long flops = 0;                // measured forward multiply-accumulates
};

std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const std::string& out_dir,
                                const AblateSwitches& switches, bool resume = false);

// Renders SVG plots from the CSV artifacts found in run_dir; missing CSVs are
// skipped, re-emission is idempotent.
void emit_plots(const std::string& run_dir);

// Writes final-checkpoint predictions on the eval split as a COCO-panoptic
// directory tree.
void export_predictions(const ExperimentConfig& cfg, const std::string& run_dir,
                        const std::string& out_dir);

}  // namespace promptseg
