#pragma once

#include "promptseg/common.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace promptseg {

// ---- ground-truth unit ----------------------------------------------------

struct SegmentInfo {
    int segment_id = 0;  // positive, unique within the sample
    int class_id = 0;    // dense global id, 1-based
    bool is_thing = false;
};

struct PanopticSample {
    int height = 0;
    int width = 0;
    std::vector<double> image;     // 3*H*W, channel-major, values in [0,1]
    std::vector<int> segment_map;  // H*W, row-major, 0 = void
    std::vector<SegmentInfo> segments;

    double& px(int c, int y, int x) { return image[(c * height + y) * width + x]; }
    double px(int c, int y, int x) const { return image[(c * height + y) * width + x]; }
    int& seg(int y, int x) { return segment_map[y * width + x]; }
    int seg(int y, int x) const { return segment_map[y * width + x]; }
};

bool operator==(const SegmentInfo& a, const SegmentInfo& b);
bool operator==(const PanopticSample& a, const PanopticSample& b);

// Throws if the sample violates its structural invariants.
void validate_sample(const PanopticSample& s);

// ---- class catalog --------------------------------------------------------

struct ClassInfo {
    int class_id = 0;  // dense, 1..|catalog|
    std::string name;
    bool is_thing = false;
};

struct ClassCatalog {
    std::vector<ClassInfo> classes;

    int size() const { return static_cast<int>(classes.size()); }
    const ClassInfo& by_id(int class_id) const;
    bool is_thing(int class_id) const { return by_id(class_id).is_thing; }
};

void validate_catalog(const ClassCatalog& c);

// ---- incremental protocol -------------------------------------------------

enum class ProtocolMode { overlap, disjoint };

struct TaskProtocol {
    std::vector<int> ordering;  // permutation of class ids
    int base_count = 0;
    int increment = 0;
    ProtocolMode mode = ProtocolMode::overlap;
    std::vector<std::vector<int>> steps;  // C^1..C^T, global class ids

    int num_steps() const { return static_cast<int>(steps.size()); }
    // 1-based step index owning a class, 0 if unknown class
    int step_of(int class_id) const;
};

TaskProtocol build_protocol(const ClassCatalog& catalog, int base, int inc,
                            ProtocolMode mode,
                            std::optional<uint64_t> ordering_seed = std::nullopt);

// Same protocol shape over an explicit class ordering; `order` must be a
// permutation of the catalog's class ids.
TaskProtocol build_protocol(const ClassCatalog& catalog, int base, int inc,
                            ProtocolMode mode, const std::vector<int>& order);

// Relabels classes outside C^t to void and filters images per the mode.
std::vector<PanopticSample> step_view(const std::vector<PanopticSample>& dataset,
                                      const TaskProtocol& protocol, int t);

// ---- synthetic scene generation ------------------------------------------

struct SceneGenConfig {
    int height = 64;
    int width = 64;
    int num_thing_classes = 18;
    int num_stuff_classes = 6;
    int max_instances_per_image = 4;
    uint64_t seed = 0;
};

void validate_scene_config(const SceneGenConfig& cfg);

// Catalog implied by a generator config: things first, then stuff, dense ids.
ClassCatalog make_catalog(const SceneGenConfig& cfg);

// Parametric shape scenes with occlusion by draw order. Every thing class
// owns a distinct color: coarse hues are shared by at most two classes that
// then differ in brightness and shape. Deterministic per
// (cfg.seed, sample index).
std::vector<PanopticSample> generate_dataset(const SceneGenConfig& cfg, int n);

// ---- COCO-panoptic interchange -------------------------------------------

// pixel id = R + 256*G + 256^2*B
int rgb_to_segment_id(int r, int g, int b);
std::array<int, 3> segment_id_to_rgb(int id);

void write_coco_panoptic(const std::string& out_dir, const ClassCatalog& catalog,
                         const std::vector<PanopticSample>& samples);
std::pair<ClassCatalog, std::vector<PanopticSample>> read_coco_panoptic(
    const std::string& annotation_file, const std::string& image_dir);

// ---- native dataset cache -------------------------------------------------

void write_cache(const std::string& dir, const ClassCatalog& catalog,
                 const std::vector<PanopticSample>& samples,
                 const SceneGenConfig& cfg);
std::pair<ClassCatalog, std::vector<PanopticSample>> read_cache(const std::string& dir);

}  // namespace promptseg
