#include "promptseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace promptseg {

namespace {

struct RawSegment {
    int class_id = 0;
    int area = 0;
};

void group_means(PQResult& result, const ClassCatalog& catalog,
                 const TaskProtocol* protocol) {
    std::set<int> base_set, new_set;
    if (protocol) {
        base_set.insert(protocol->steps[0].begin(), protocol->steps[0].end());
        for (int t = 1; t < protocol->num_steps(); ++t)
            new_set.insert(protocol->steps[t].begin(), protocol->steps[t].end());
    }
    auto accumulate = [&](const std::string& name, auto member) {
        GroupScore g;
        for (const auto& [cid, stats] : result.per_class) {
            if (!stats.touched()) continue;
            if (!member(cid)) continue;
            g.pq += stats.pq();
            g.sq += stats.sq();
            g.rq += stats.rq();
            ++g.classes;
        }
        if (g.classes > 0) {
            g.pq /= g.classes;
            g.sq /= g.classes;
            g.rq /= g.classes;
        }
        result.groups[name] = g;
    };
    accumulate("all", [](int) { return true; });
    accumulate("things", [&](int c) { return catalog.is_thing(c); });
    accumulate("stuff", [&](int c) { return !catalog.is_thing(c); });
    if (protocol) {
        accumulate("base", [&](int c) { return base_set.count(c) != 0; });
        accumulate("new", [&](int c) { return new_set.count(c) != 0; });
    }
}

}  // namespace

PQResult panoptic_quality(const std::vector<PanopticPrediction>& preds,
                          const std::vector<PanopticSample>& gts,
                          const ClassCatalog& catalog, const TaskProtocol* protocol) {
    if (preds.size() != gts.size())
        throw InputError("panoptic_quality: pred/gt image lists misaligned");

    PQResult result;
    for (const auto& c : catalog.classes) result.per_class[c.class_id];  // touch all

    for (size_t i = 0; i < preds.size(); ++i) {
        const auto& pred = preds[i];
        const auto& gt = gts[i];
        if (pred.height != gt.height || pred.width != gt.width)
            throw InputError("panoptic_quality: image size mismatch at index " +
                             std::to_string(i));
        const size_t npix = gt.segment_map.size();

        std::map<int, RawSegment> gt_segs, pred_segs;
        for (const auto& s : gt.segments) gt_segs[s.segment_id] = {s.class_id, 0};
        for (const auto& s : pred.segments) pred_segs[s.segment_id] = {s.class_id, 0};

        std::map<std::pair<int, int>, int> inter;  // (pred id, gt id incl 0) -> px
        for (size_t p = 0; p < npix; ++p) {
            int g = gt.segment_map[p];
            int q = pred.segment_map[p];
            if (g != 0) gt_segs.at(g).area += 1;
            if (q != 0) {
                pred_segs.at(q).area += 1;
                ++inter[{q, g}];
            }
        }

        std::set<int> matched_gt, matched_pred;
        for (const auto& [key, overlap] : inter) {
            auto [qid, gid] = key;
            if (gid == 0) continue;
            const auto& ps = pred_segs.at(qid);
            const auto& gs = gt_segs.at(gid);
            if (ps.class_id != gs.class_id) continue;
            int pred_void = 0;
            auto it = inter.find({qid, 0});
            if (it != inter.end()) pred_void = it->second;
            double iou = static_cast<double>(overlap) /
                         (ps.area + gs.area - overlap - pred_void);
            if (iou > 0.5) {
                // the > 0.5 rule makes matches unique; assert that holds
                if (!matched_gt.insert(gid).second || !matched_pred.insert(qid).second)
                    throw NumericalError("panoptic_quality: non-unique IoU>0.5 match");
                auto& st = result.per_class[ps.class_id];
                st.iou_sum += iou;
                st.tp += 1;
            }
        }
        for (const auto& [gid, gs] : gt_segs)
            if (!matched_gt.count(gid)) result.per_class[gs.class_id].fn += 1;
        for (const auto& [qid, ps] : pred_segs)
            if (!matched_pred.count(qid) && ps.area > 0)
                result.per_class[ps.class_id].fp += 1;
    }

    group_means(result, catalog, protocol);
    return result;
}

MIoUResult mean_iou(const std::vector<std::vector<int>>& pred_maps,
                    const std::vector<std::vector<int>>& gt_maps,
                    const ClassCatalog& catalog, const TaskProtocol* protocol) {
    if (pred_maps.size() != gt_maps.size())
        throw InputError("mean_iou: pred/gt lists misaligned");
    std::map<int, long long> tp, fp, fn;
    for (size_t i = 0; i < pred_maps.size(); ++i) {
        const auto& pm = pred_maps[i];
        const auto& gm = gt_maps[i];
        if (pm.size() != gm.size()) throw InputError("mean_iou: map size mismatch");
        for (size_t p = 0; p < pm.size(); ++p) {
            int g = gm[p], q = pm[p];
            if (g == 0) continue;  // void excluded
            if (q == g)
                ++tp[g];
            else {
                ++fn[g];
                if (q != 0) ++fp[q];
            }
        }
    }
    MIoUResult result;
    std::set<int> touched;
    for (const auto& [c, v] : tp) touched.insert(c);
    for (const auto& [c, v] : fp) touched.insert(c);
    for (const auto& [c, v] : fn) touched.insert(c);
    for (int c : touched) {
        long long denom = tp[c] + fp[c] + fn[c];
        result.per_class[c] = denom > 0 ? static_cast<double>(tp[c]) / denom : 0.0;
    }

    std::set<int> base_set, new_set;
    if (protocol) {
        base_set.insert(protocol->steps[0].begin(), protocol->steps[0].end());
        for (int t = 1; t < protocol->num_steps(); ++t)
            new_set.insert(protocol->steps[t].begin(), protocol->steps[t].end());
    }
    auto mean_over = [&](auto member) {
        double acc = 0;
        int n = 0;
        for (const auto& [c, iou] : result.per_class)
            if (member(c)) {
                acc += iou;
                ++n;
            }
        return n > 0 ? acc / n : 0.0;
    };
    result.groups["all"] = mean_over([](int) { return true; });
    result.groups["things"] = mean_over([&](int c) { return catalog.is_thing(c); });
    result.groups["stuff"] = mean_over([&](int c) { return !catalog.is_thing(c); });
    if (protocol) {
        result.groups["base"] = mean_over([&](int c) { return base_set.count(c) != 0; });
        result.groups["new"] = mean_over([&](int c) { return new_set.count(c) != 0; });
    }
    return result;
}

std::vector<GroupRow> group_report(const PQResult& result, const TaskProtocol& protocol) {
    (void)protocol;
    std::vector<GroupRow> rows;
    for (const std::string& name : {"base", "new", "all"}) {
        auto it = result.groups.find(name);
        GroupRow row;
        row.name = name;
        if (it != result.groups.end()) {
            row.pq = it->second.pq;
            row.sq = it->second.sq;
            row.rq = it->second.rq;
            row.classes = it->second.classes;
        }
        rows.push_back(row);
    }
    return rows;
}

std::string format_percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", fraction * 100.0);
    return buf;
}

std::vector<int> sample_class_map(const PanopticSample& s) {
    std::map<int, int> seg_class;
    for (const auto& seg : s.segments) seg_class[seg.segment_id] = seg.class_id;
    std::vector<int> out(s.segment_map.size(), 0);
    for (size_t p = 0; p < out.size(); ++p) {
        int id = s.segment_map[p];
        if (id != 0) out[p] = seg_class.at(id);
    }
    return out;
}

}  // namespace promptseg
