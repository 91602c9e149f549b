#pragma once

#include "promptseg/data.hpp"
#include "promptseg/inference.hpp"

#include <map>
#include <string>
#include <vector>

namespace promptseg {

struct ClassStats {
    double iou_sum = 0;
    int tp = 0, fp = 0, fn = 0;

    bool touched() const { return tp + fp + fn > 0; }
    double pq() const { return touched() ? iou_sum / (tp + 0.5 * fp + 0.5 * fn) : 0; }
    double sq() const { return tp > 0 ? iou_sum / tp : 0; }
    double rq() const { return touched() ? tp / (tp + 0.5 * fp + 0.5 * fn) : 0; }
};

struct GroupScore {
    double pq = 0, sq = 0, rq = 0;
    int classes = 0;  // classes contributing to the mean
};

struct PQResult {
    std::map<int, ClassStats> per_class;
    // keys: "base", "new", "all", "things", "stuff" (base/new need a protocol)
    std::map<std::string, GroupScore> groups;
};

// preds and gts aligned by index; fractions internally, percent at the CLI.
PQResult panoptic_quality(const std::vector<PanopticPrediction>& preds,
                          const std::vector<PanopticSample>& gts,
                          const ClassCatalog& catalog,
                          const TaskProtocol* protocol = nullptr);

struct MIoUResult {
    std::map<int, double> per_class;
    std::map<std::string, double> groups;
};

MIoUResult mean_iou(const std::vector<std::vector<int>>& pred_maps,
                    const std::vector<std::vector<int>>& gt_maps,
                    const ClassCatalog& catalog, const TaskProtocol* protocol = nullptr);

struct GroupRow {
    std::string name;
    double pq = 0, sq = 0, rq = 0;
    int classes = 0;
};

std::vector<GroupRow> group_report(const PQResult& result, const TaskProtocol& protocol);

// percent with one decimal, table style
std::string format_percent(double fraction);

// class map of a ground-truth sample (segment ids resolved to classes)
std::vector<int> sample_class_map(const PanopticSample& s);

}  // namespace promptseg
