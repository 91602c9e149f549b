#include "promptseg/data.hpp"

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace promptseg {

bool operator==(const SegmentInfo& a, const SegmentInfo& b) {
    return a.segment_id == b.segment_id && a.class_id == b.class_id &&
           a.is_thing == b.is_thing;
}

bool operator==(const PanopticSample& a, const PanopticSample& b) {
    return a.height == b.height && a.width == b.width && a.image == b.image &&
           a.segment_map == b.segment_map && a.segments == b.segments;
}

void validate_sample(const PanopticSample& s) {
    if (s.height < 1 || s.width < 1) throw FormatError("empty sample");
    if (s.image.size() != static_cast<size_t>(3 * s.height * s.width) ||
        s.segment_map.size() != static_cast<size_t>(s.height * s.width))
        throw FormatError("sample buffer sizes disagree with its dimensions");
    for (double v : s.image)
        if (!(v >= 0.0 && v <= 1.0))
            throw FormatError("image values must lie in [0,1]");
    std::set<int> listed;
    std::map<int, int> stuff_count;
    for (const auto& seg : s.segments) {
        if (seg.segment_id <= 0) throw FormatError("segment id must be positive");
        if (!listed.insert(seg.segment_id).second)
            throw FormatError("duplicate segment id " + std::to_string(seg.segment_id));
        if (!seg.is_thing && ++stuff_count[seg.class_id] > 1)
            throw FormatError("more than one stuff segment for class " +
                              std::to_string(seg.class_id));
    }
    std::set<int> present;
    for (int v : s.segment_map)
        if (v != 0) present.insert(v);
    if (present != listed)
        throw FormatError("segment map ids and segment records disagree");
}

const ClassInfo& ClassCatalog::by_id(int class_id) const {
    for (const auto& c : classes)
        if (c.class_id == class_id) return c;
    throw InputError("unknown class id " + std::to_string(class_id));
}

void validate_catalog(const ClassCatalog& c) {
    std::set<int> ids;
    for (const auto& cl : c.classes) ids.insert(cl.class_id);
    if (static_cast<int>(ids.size()) != c.size())
        throw FormatError("catalog class ids not unique");
    for (int i = 1; i <= c.size(); ++i)
        if (!ids.count(i)) throw FormatError("catalog class ids not dense");
}

// ---- protocol -------------------------------------------------------------

int TaskProtocol::step_of(int class_id) const {
    for (int t = 0; t < num_steps(); ++t)
        for (int c : steps[t])
            if (c == class_id) return t + 1;
    return 0;
}

TaskProtocol build_protocol(const ClassCatalog& catalog, int base, int inc,
                            ProtocolMode mode, std::optional<uint64_t> ordering_seed) {
    const int k = catalog.size();
    if (base < 1 || base > k) throw ProtocolError("base class count out of range");
    if (base < k) {
        if (inc < 1 || (k - base) % inc != 0)
            throw ProtocolError("base " + std::to_string(base) + " + k*" +
                                std::to_string(inc) + " does not tile " +
                                std::to_string(k) + " classes");
    }
    TaskProtocol p;
    p.base_count = base;
    p.increment = inc;
    p.mode = mode;
    for (const auto& c : catalog.classes) p.ordering.push_back(c.class_id);
    std::sort(p.ordering.begin(), p.ordering.end());
    if (ordering_seed) {
        Rng rng(*ordering_seed);
        rng.shuffle(p.ordering);
    }
    int pos = 0;
    p.steps.emplace_back(p.ordering.begin(), p.ordering.begin() + base);
    pos = base;
    while (pos < k) {
        p.steps.emplace_back(p.ordering.begin() + pos, p.ordering.begin() + pos + inc);
        pos += inc;
    }
    return p;
}

TaskProtocol build_protocol(const ClassCatalog& catalog, int base, int inc,
                            ProtocolMode mode, const std::vector<int>& order) {
    std::vector<int> sorted_ids;
    for (const auto& c : catalog.classes) sorted_ids.push_back(c.class_id);
    std::sort(sorted_ids.begin(), sorted_ids.end());
    std::vector<int> sorted_order = order;
    std::sort(sorted_order.begin(), sorted_order.end());
    if (sorted_order != sorted_ids)
        throw ProtocolError("explicit ordering is not a permutation of the catalog");
    TaskProtocol p = build_protocol(catalog, base, inc, mode);
    p.ordering = order;
    p.steps.clear();
    p.steps.emplace_back(p.ordering.begin(), p.ordering.begin() + base);
    int pos = base;
    while (pos < static_cast<int>(order.size())) {
        p.steps.emplace_back(p.ordering.begin() + pos, p.ordering.begin() + pos + inc);
        pos += inc;
    }
    return p;
}

std::vector<PanopticSample> step_view(const std::vector<PanopticSample>& dataset,
                                      const TaskProtocol& protocol, int t) {
    if (t < 1 || t > protocol.num_steps())
        throw ProtocolError("step index " + std::to_string(t) + " out of range");
    std::set<int> current(protocol.steps[t - 1].begin(), protocol.steps[t - 1].end());
    std::set<int> seen;  // C^{1:t}
    for (int k = 0; k < t; ++k)
        seen.insert(protocol.steps[k].begin(), protocol.steps[k].end());

    std::vector<PanopticSample> out;
    for (const auto& sample : dataset) {
        bool has_current = false;
        bool all_seen = true;
        for (const auto& seg : sample.segments) {
            if (current.count(seg.class_id)) has_current = true;
            if (!seen.count(seg.class_id)) all_seen = false;
        }
        if (!has_current) continue;
        if (protocol.mode == ProtocolMode::disjoint && !all_seen) continue;

        PanopticSample view = sample;
        std::set<int> voided;
        view.segments.clear();
        for (const auto& seg : sample.segments) {
            if (current.count(seg.class_id))
                view.segments.push_back(seg);
            else
                voided.insert(seg.segment_id);
        }
        if (!voided.empty())
            for (int& v : view.segment_map)
                if (voided.count(v)) v = 0;
        out.push_back(std::move(view));
    }
    return out;
}

// ---- scene generation -----------------------------------------------------

void validate_scene_config(const SceneGenConfig& cfg) {
    if (cfg.height < 32 || cfg.width < 32)
        throw ConfigError("image size must be at least 32x32");
    if (cfg.num_thing_classes < 1 || cfg.num_stuff_classes < 1)
        throw ConfigError("need at least one thing and one stuff class");
    if (cfg.max_instances_per_image < 1)
        throw ConfigError("max_instances_per_image must be positive");
}

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1)      { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else             { r = c; b = x; }
    double m = v - c;
    return {r + m, g + m, b + m};
}

// things use coarse hues split by brightness: classes j and j+nh share a hue
// but differ in value and shape, so every class owns a distinct color
int thing_hue_count(int num_things) { return std::max(1, (num_things + 1) / 2); }

std::array<double, 3> thing_color(int j, int num_things) {
    int nh = thing_hue_count(num_things);
    double v = (j / nh) % 2 == 0 ? 0.92 : 0.55;
    return hsv_to_rgb(static_cast<double>(j % nh) / nh, 0.85, v);
}

int thing_shape(int j, int num_things) {
    int nh = thing_hue_count(num_things);
    return (j / nh + j) % 3;  // 0 ellipse, 1 rectangle, 2 triangle
}

std::array<double, 3> stuff_color(int j, int num_stuff) {
    return hsv_to_rgb((j + 0.5) / num_stuff, 0.25, 0.5);
}

bool inside_shape(int shape, double dx, double dy, double a, double b) {
    switch (shape) {
        case 0: return (dx * dx) / (a * a) + (dy * dy) / (b * b) <= 1.0;
        case 1: return std::abs(dx) <= a && std::abs(dy) <= b;
        default: {  // isoceles triangle pointing up
            if (dy < -b || dy > b) return false;
            double half = a * (dy + b) / (2.0 * b);
            return std::abs(dx) <= half;
        }
    }
}

void fill_region(PanopticSample& s, int seg_id, const std::array<double, 3>& col,
                 int y0, int y1) {
    for (int y = y0; y < y1; ++y)
        for (int x = 0; x < s.width; ++x) {
            s.seg(y, x) = seg_id;
            for (int c = 0; c < 3; ++c) s.px(c, y, x) = col[c];
        }
}

}  // namespace

ClassCatalog make_catalog(const SceneGenConfig& cfg) {
    validate_scene_config(cfg);
    ClassCatalog cat;
    char buf[32];
    for (int j = 0; j < cfg.num_thing_classes; ++j) {
        std::snprintf(buf, sizeof(buf), "thing_%02d", j + 1);
        cat.classes.push_back({j + 1, buf, true});
    }
    for (int j = 0; j < cfg.num_stuff_classes; ++j) {
        std::snprintf(buf, sizeof(buf), "stuff_%02d", j + 1);
        cat.classes.push_back({cfg.num_thing_classes + j + 1, buf, false});
    }
    return cat;
}

std::vector<PanopticSample> generate_dataset(const SceneGenConfig& cfg, int n) {
    validate_scene_config(cfg);
    if (n < 1) throw ConfigError("sample count must be positive");
    const ClassCatalog cat = make_catalog(cfg);
    const int nt = cfg.num_thing_classes;
    const int ns = cfg.num_stuff_classes;
    const int H = cfg.height, W = cfg.width;
    const int min_visible = 12;

    std::vector<PanopticSample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        Rng rng(Rng::mix(cfg.seed, static_cast<uint64_t>(i)));
        PanopticSample s;
        s.height = H;
        s.width = W;
        s.image.assign(3 * H * W, 0.0);
        s.segment_map.assign(H * W, 0);

        // guaranteed class keeps per-class coverage over large datasets
        const ClassInfo& guaranteed = cat.classes[i % cat.size()];

        int canvas_stuff = guaranteed.is_thing
                               ? static_cast<int>(rng.below(ns))
                               : guaranteed.class_id - nt - 1;
        int next_id = 1;
        fill_region(s, next_id, stuff_color(canvas_stuff, ns), 0, H);
        s.segments.push_back({next_id, nt + canvas_stuff + 1, false});
        ++next_id;

        if (ns >= 2 && rng.uniform() < 0.7) {
            int band_stuff = static_cast<int>(rng.below(ns - 1));
            if (band_stuff >= canvas_stuff) ++band_stuff;
            int bh = rng.range(H / 5, H / 3);
            int y0 = rng.range(0, H - bh);
            fill_region(s, next_id, stuff_color(band_stuff, ns), y0, y0 + bh);
            s.segments.push_back({next_id, nt + band_stuff + 1, false});
            ++next_id;
        }

        int count = rng.range(1, cfg.max_instances_per_image);
        for (int k = 0; k < count; ++k) {
            int j = static_cast<int>(rng.below(nt));
            if (k == count - 1 && guaranteed.is_thing) j = guaranteed.class_id - 1;
            double a = rng.uniform(6.0, 14.0) * W / 64.0;
            double b = rng.uniform(6.0, 14.0) * H / 64.0;
            double cx = rng.uniform(a, W - 1 - a);
            double cy = rng.uniform(b, H - 1 - b);
            int shape = thing_shape(j, nt);
            auto col = thing_color(j, nt);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    if (inside_shape(shape, x - cx, y - cy, a, b)) {
                        s.seg(y, x) = next_id;
                        for (int c = 0; c < 3; ++c) s.px(c, y, x) = col[c];
                    }
            s.segments.push_back({next_id, j + 1, true});
            ++next_id;
        }

        // occlusion can shave segments down to slivers; void those
        std::map<int, int> visible;
        for (int v : s.segment_map) ++visible[v];
        std::set<int> dropped;
        for (const auto& seg : s.segments) {
            auto it = visible.find(seg.segment_id);
            if (it == visible.end() || it->second < min_visible)
                dropped.insert(seg.segment_id);
        }
        if (!dropped.empty()) {
            std::erase_if(s.segments, [&](const SegmentInfo& seg) {
                return dropped.count(seg.segment_id) != 0;
            });
            for (int& v : s.segment_map)
                if (dropped.count(v)) v = 0;
        }

        // sensor noise, snapped to the 8-bit grid so PNG round-trips exactly
        for (double& v : s.image) {
            v += rng.uniform(-0.03, 0.03);
            v = std::clamp(v, 0.0, 1.0);
            v = std::round(v * 255.0) / 255.0;
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---- COCO-panoptic interchange -------------------------------------------

int rgb_to_segment_id(int r, int g, int b) { return r + 256 * g + 65536 * b; }

std::array<int, 3> segment_id_to_rgb(int id) {
    return {id % 256, (id / 256) % 256, id / 65536};
}

void write_coco_panoptic(const std::string& out_dir, const ClassCatalog& catalog,
                         const std::vector<PanopticSample>& samples) {
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "panoptic");

    json root;
    root["images"] = json::array();
    root["categories"] = json::array();
    root["annotations"] = json::array();
    for (const auto& c : catalog.classes)
        root["categories"].push_back(
            {{"id", c.class_id}, {"name", c.name}, {"isthing", c.is_thing ? 1 : 0}});

    char buf[64];
    for (size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        std::snprintf(buf, sizeof(buf), "%06zu.png", i);
        std::string img_name = std::string("images/") + buf;
        std::string pan_name = std::string("panoptic/") + buf;

        cv::Mat img(s.height, s.width, CV_8UC3);
        cv::Mat pan(s.height, s.width, CV_8UC3);
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                auto& p = img.at<cv::Vec3b>(y, x);  // BGR
                p[2] = static_cast<uchar>(std::lround(s.px(0, y, x) * 255.0));
                p[1] = static_cast<uchar>(std::lround(s.px(1, y, x) * 255.0));
                p[0] = static_cast<uchar>(std::lround(s.px(2, y, x) * 255.0));
                auto rgb = segment_id_to_rgb(s.seg(y, x));
                auto& q = pan.at<cv::Vec3b>(y, x);
                q[2] = static_cast<uchar>(rgb[0]);
                q[1] = static_cast<uchar>(rgb[1]);
                q[0] = static_cast<uchar>(rgb[2]);
            }
        cv::imwrite((fs::path(out_dir) / img_name).string(), img);
        cv::imwrite((fs::path(out_dir) / pan_name).string(), pan);

        root["images"].push_back({{"id", static_cast<int>(i) + 1},
                                  {"file_name", img_name},
                                  {"height", s.height},
                                  {"width", s.width}});
        json segs = json::array();
        for (const auto& seg : s.segments)
            segs.push_back({{"id", seg.segment_id}, {"category_id", seg.class_id}});
        root["annotations"].push_back({{"image_id", static_cast<int>(i) + 1},
                                       {"file_name", pan_name},
                                       {"segments_info", segs}});
    }
    std::ofstream f(fs::path(out_dir) / "annotations.json");
    f << root.dump(1);
}

std::pair<ClassCatalog, std::vector<PanopticSample>> read_coco_panoptic(
    const std::string& annotation_file, const std::string& image_dir) {
    std::ifstream f(annotation_file);
    if (!f) throw FormatError("cannot open annotation file " + annotation_file);
    json root;
    try {
        f >> root;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed annotation json: ") + e.what());
    }

    // remap category ids to a dense global index, ordered by source id
    std::vector<std::tuple<int, std::string, bool>> cats;
    for (const auto& c : root.at("categories"))
        cats.emplace_back(c.at("id").get<int>(), c.at("name").get<std::string>(),
                          c.at("isthing").get<int>() != 0);
    std::sort(cats.begin(), cats.end());
    ClassCatalog catalog;
    std::map<int, int> remap;
    for (size_t i = 0; i < cats.size(); ++i) {
        auto [src, name, thing] = cats[i];
        if (remap.count(src)) throw FormatError("duplicate category id");
        remap[src] = static_cast<int>(i) + 1;
        catalog.classes.push_back({static_cast<int>(i) + 1, name, thing});
    }

    std::map<int, json> images;
    for (const auto& im : root.at("images")) images[im.at("id").get<int>()] = im;

    std::vector<PanopticSample> samples;
    for (const auto& ann : root.at("annotations")) {
        int image_id = ann.at("image_id").get<int>();
        auto it = images.find(image_id);
        if (it == images.end())
            throw FormatError("annotation references unknown image " +
                              std::to_string(image_id));
        std::string img_path =
            (fs::path(image_dir) / it->second.at("file_name").get<std::string>()).string();
        std::string pan_path =
            (fs::path(image_dir) / ann.at("file_name").get<std::string>()).string();
        cv::Mat img = cv::imread(img_path, cv::IMREAD_COLOR);
        if (img.empty()) throw FormatError("missing image file " + img_path);
        cv::Mat pan = cv::imread(pan_path, cv::IMREAD_COLOR);
        if (pan.empty()) throw FormatError("missing panoptic file " + pan_path);

        PanopticSample s;
        s.height = img.rows;
        s.width = img.cols;
        if (s.height != it->second.at("height").get<int>() ||
            s.width != it->second.at("width").get<int>())
            throw FormatError("image size mismatch for " + img_path);
        s.image.assign(3 * s.height * s.width, 0.0);
        s.segment_map.assign(s.height * s.width, 0);
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                const auto& p = img.at<cv::Vec3b>(y, x);
                s.px(0, y, x) = p[2] / 255.0;
                s.px(1, y, x) = p[1] / 255.0;
                s.px(2, y, x) = p[0] / 255.0;
                const auto& q = pan.at<cv::Vec3b>(y, x);
                s.seg(y, x) = rgb_to_segment_id(q[2], q[1], q[0]);
            }

        std::set<int> listed;
        for (const auto& si : ann.at("segments_info")) {
            SegmentInfo seg;
            seg.segment_id = si.at("id").get<int>();
            int src_cat = si.at("category_id").get<int>();
            auto rit = remap.find(src_cat);
            if (rit == remap.end())
                throw FormatError("unknown class " + std::to_string(src_cat) +
                                  " in " + pan_path + " segment " +
                                  std::to_string(seg.segment_id));
            seg.class_id = rit->second;
            seg.is_thing = catalog.classes[seg.class_id - 1].is_thing;
            if (!listed.insert(seg.segment_id).second)
                throw FormatError("segment ids not bijective in " + pan_path);
            s.segments.push_back(seg);
        }
        std::set<int> present;
        for (int v : s.segment_map)
            if (v != 0) present.insert(v);
        if (present != listed)
            throw FormatError("segment ids not bijective between PNG and annotation in " +
                              pan_path);
        samples.push_back(std::move(s));
    }
    return {catalog, samples};
}

// ---- native cache ---------------------------------------------------------

namespace {

std::string scene_config_hash(const SceneGenConfig& cfg) {
    Fnv1a h;
    int fields[5] = {cfg.height, cfg.width, cfg.num_thing_classes,
                     cfg.num_stuff_classes, cfg.max_instances_per_image};
    h.update(fields, sizeof(fields));
    h.update(&cfg.seed, sizeof(cfg.seed));
    return h.hex();
}

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_pod(std::ifstream& f, T& v) {
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace

void write_cache(const std::string& dir, const ClassCatalog& catalog,
                 const std::vector<PanopticSample>& samples,
                 const SceneGenConfig& cfg) {
    fs::create_directories(dir);
    json manifest;
    manifest["seed"] = cfg.seed;
    manifest["config_hash"] = scene_config_hash(cfg);
    manifest["count"] = samples.size();
    manifest["catalog"] = json::array();
    for (const auto& c : catalog.classes)
        manifest["catalog"].push_back(
            {{"id", c.class_id}, {"name", c.name}, {"isthing", c.is_thing ? 1 : 0}});
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(1);

    char buf[64];
    for (size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        std::snprintf(buf, sizeof(buf), "sample_%06zu.bin", i);
        std::ofstream f(fs::path(dir) / buf, std::ios::binary);
        write_pod(f, s.height);
        write_pod(f, s.width);
        f.write(reinterpret_cast<const char*>(s.image.data()),
                static_cast<std::streamsize>(s.image.size() * sizeof(double)));
        f.write(reinterpret_cast<const char*>(s.segment_map.data()),
                static_cast<std::streamsize>(s.segment_map.size() * sizeof(int)));
        int nseg = static_cast<int>(s.segments.size());
        write_pod(f, nseg);
        for (const auto& seg : s.segments) {
            write_pod(f, seg.segment_id);
            write_pod(f, seg.class_id);
            int thing = seg.is_thing ? 1 : 0;
            write_pod(f, thing);
        }
    }
}

std::pair<ClassCatalog, std::vector<PanopticSample>> read_cache(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw FormatError("cache manifest missing in " + dir);
    json manifest;
    mf >> manifest;
    ClassCatalog catalog;
    for (const auto& c : manifest.at("catalog"))
        catalog.classes.push_back({c.at("id").get<int>(),
                                   c.at("name").get<std::string>(),
                                   c.at("isthing").get<int>() != 0});
    size_t count = manifest.at("count").get<size_t>();
    std::vector<PanopticSample> samples;
    char buf[64];
    for (size_t i = 0; i < count; ++i) {
        std::snprintf(buf, sizeof(buf), "sample_%06zu.bin", i);
        std::ifstream f(fs::path(dir) / buf, std::ios::binary);
        if (!f) throw FormatError(std::string("cache blob missing: ") + buf);
        PanopticSample s;
        read_pod(f, s.height);
        read_pod(f, s.width);
        s.image.resize(static_cast<size_t>(3) * s.height * s.width);
        s.segment_map.resize(static_cast<size_t>(s.height) * s.width);
        f.read(reinterpret_cast<char*>(s.image.data()),
               static_cast<std::streamsize>(s.image.size() * sizeof(double)));
        f.read(reinterpret_cast<char*>(s.segment_map.data()),
               static_cast<std::streamsize>(s.segment_map.size() * sizeof(int)));
        int nseg = 0;
        read_pod(f, nseg);
        for (int j = 0; j < nseg; ++j) {
            SegmentInfo seg;
            int thing = 0;
            read_pod(f, seg.segment_id);
            read_pod(f, seg.class_id);
            read_pod(f, thing);
            seg.is_thing = thing != 0;
            s.segments.push_back(seg);
        }
        samples.push_back(std::move(s));
    }
    return {catalog, samples};
}

}  // namespace promptseg
