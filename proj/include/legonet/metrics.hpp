#ifndef LEGONET_METRICS_HPP
#define LEGONET_METRICS_HPP

#include <array>
#include <map>
#include <string>
#include <vector>

namespace lego {

// Binary mask over a D,H,W grid, stored W-fastest as 0/1 doubles.
struct OverlapScores {
    double dsc = 0, precision = 0, recall = 0;
};

// Both empty -> all ones; empty prediction against a nonempty target -> zeros.
OverlapScores dsc_precision_recall(const std::vector<double>& pred,
                                   const std::vector<double>& target);

// Border voxels (foreground with a background face neighbor, volume edge
// counts as background), distances in mm. Default convention: 95th percentile
// of the combined bidirectional surface-distance multiset; the flag switches
// to the max of the two directed percentiles.
double hd95(const std::vector<double>& a, const std::vector<double>& b,
            const std::array<long, 3>& shape, const std::array<double, 3>& spacing_mm,
            bool max_of_directed = false);

struct CaseMetrics {
    std::string case_id;
    double dsc = 0, precision = 0, recall = 0, hd95_mm = 0;
};

struct MetricsReport {
    std::vector<CaseMetrics> cases;
    CaseMetrics mean() const;
    CaseMetrics stddev() const;
    std::string to_csv() const;
};

struct MaskSet {
    std::string label;
    std::map<std::string, std::vector<double>> masks;  // case_id -> mask
};

struct AgreementTable {
    std::vector<std::string> labels;
    std::vector<std::vector<double>> mean_dsc;
    std::vector<std::vector<double>> std_dsc;
    std::string to_csv() const;
};

// Pairwise mean/std DSC over shared case ids; throws if a pair shares none.
AgreementTable agreement_matrix(const std::vector<MaskSet>& sets);

} // namespace lego

#endif
