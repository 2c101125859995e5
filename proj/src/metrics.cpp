#include "legonet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lego {

OverlapScores dsc_precision_recall(const std::vector<double>& pred,
                                   const std::vector<double>& target) {
    if (pred.size() != target.size())
        throw std::invalid_argument("dsc_precision_recall: size mismatch");
    double tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        bool p = pred[i] != 0.0, t = target[i] != 0.0;
        tp += p && t;
        fp += p && !t;
        fn += !p && t;
    }
    if (tp + fp + fn == 0) return {1, 1, 1};
    OverlapScores s;
    s.dsc = 2 * tp / (2 * tp + fp + fn);
    s.precision = tp + fp > 0 ? tp / (tp + fp) : 0;
    s.recall = tp + fn > 0 ? tp / (tp + fn) : 0;
    return s;
}

namespace {

std::vector<std::array<long, 3>> border_voxels(const std::vector<double>& m,
                                               const std::array<long, 3>& sh) {
    auto at = [&](long d, long h, long w) {
        if (d < 0 || h < 0 || w < 0 || d >= sh[0] || h >= sh[1] || w >= sh[2]) return false;
        return m[(d * sh[1] + h) * sh[2] + w] != 0.0;
    };
    std::vector<std::array<long, 3>> out;
    for (long d = 0; d < sh[0]; ++d)
        for (long h = 0; h < sh[1]; ++h)
            for (long w = 0; w < sh[2]; ++w) {
                if (!at(d, h, w)) continue;
                if (!at(d - 1, h, w) || !at(d + 1, h, w) || !at(d, h - 1, w) ||
                    !at(d, h + 1, w) || !at(d, h, w - 1) || !at(d, h, w + 1))
                    out.push_back({d, h, w});
            }
    return out;
}

void directed_distances(const std::vector<std::array<long, 3>>& from,
                        const std::vector<std::array<long, 3>>& to,
                        const std::array<double, 3>& sp, std::vector<double>& out) {
    for (const auto& a : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& b : to) {
            double dd = (a[0] - b[0]) * sp[0];
            double dh = (a[1] - b[1]) * sp[1];
            double dw = (a[2] - b[2]) * sp[2];
            best = std::min(best, dd * dd + dh * dh + dw * dw);
        }
        out.push_back(std::sqrt(best));
    }
}

double percentile95(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double pos = 0.95 * static_cast<double>(v.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    if (lo + 1 >= v.size()) return v.back();
    double frac = pos - static_cast<double>(lo);
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

} // namespace

double hd95(const std::vector<double>& a, const std::vector<double>& b,
            const std::array<long, 3>& shape, const std::array<double, 3>& spacing_mm,
            bool max_of_directed) {
    long n = shape[0] * shape[1] * shape[2];
    if (static_cast<long>(a.size()) != n || static_cast<long>(b.size()) != n)
        throw std::invalid_argument("hd95: mask size does not match shape");
    auto ba = border_voxels(a, shape);
    auto bb = border_voxels(b, shape);
    if (ba.empty()) throw std::invalid_argument("hd95: first mask is empty");
    if (bb.empty()) throw std::invalid_argument("hd95: second mask is empty");
    std::vector<double> dab, dba;
    directed_distances(ba, bb, spacing_mm, dab);
    directed_distances(bb, ba, spacing_mm, dba);
    if (max_of_directed) return std::max(percentile95(dab), percentile95(dba));
    dab.insert(dab.end(), dba.begin(), dba.end());
    return percentile95(dab);
}

namespace {

CaseMetrics reduce_cases(const std::vector<CaseMetrics>& cs, bool want_std) {
    if (cs.empty()) throw std::invalid_argument("metrics report is empty");
    auto agg = [&](auto field) {
        double m = 0;
        for (const auto& c : cs) m += c.*field;
        m /= static_cast<double>(cs.size());
        if (!want_std) return m;
        double v = 0;
        for (const auto& c : cs) v += (c.*field - m) * (c.*field - m);
        return std::sqrt(v / static_cast<double>(cs.size()));
    };
    CaseMetrics out;
    out.case_id = want_std ? "std" : "mean";
    out.dsc = agg(&CaseMetrics::dsc);
    out.precision = agg(&CaseMetrics::precision);
    out.recall = agg(&CaseMetrics::recall);
    out.hd95_mm = agg(&CaseMetrics::hd95_mm);
    return out;
}

} // namespace

CaseMetrics MetricsReport::mean() const { return reduce_cases(cases, false); }
CaseMetrics MetricsReport::stddev() const { return reduce_cases(cases, true); }

std::string MetricsReport::to_csv() const {
    std::ostringstream os;
    os << "case_id,dsc,precision,recall,hd95_mm\n";
    os.precision(10);
    auto row = [&](const CaseMetrics& c) {
        os << c.case_id << "," << c.dsc << "," << c.precision << "," << c.recall << ","
           << c.hd95_mm << "\n";
    };
    for (const auto& c : cases) row(c);
    row(mean());
    row(stddev());
    return os.str();
}

AgreementTable agreement_matrix(const std::vector<MaskSet>& sets) {
    size_t n = sets.size();
    AgreementTable t;
    t.mean_dsc.assign(n, std::vector<double>(n, 1.0));
    t.std_dsc.assign(n, std::vector<double>(n, 0.0));
    for (const auto& s : sets) t.labels.push_back(s.label);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            std::vector<double> scores;
            for (const auto& [id, mask] : sets[i].masks) {
                auto it = sets[j].masks.find(id);
                if (it == sets[j].masks.end()) continue;
                scores.push_back(dsc_precision_recall(mask, it->second).dsc);
            }
            if (scores.empty())
                throw std::invalid_argument("agreement_matrix: no shared cases between " +
                                            sets[i].label + " and " + sets[j].label);
            double m = 0;
            for (double s : scores) m += s;
            m /= static_cast<double>(scores.size());
            double v = 0;
            for (double s : scores) v += (s - m) * (s - m);
            double sd = std::sqrt(v / static_cast<double>(scores.size()));
            t.mean_dsc[i][j] = t.mean_dsc[j][i] = m;
            t.std_dsc[i][j] = t.std_dsc[j][i] = sd;
        }
    return t;
}

std::string AgreementTable::to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "label";
    for (const auto& l : labels) os << "," << l;
    os << "\n";
    for (size_t i = 0; i < labels.size(); ++i) {
        os << labels[i];
        for (size_t j = 0; j < labels.size(); ++j) os << "," << mean_dsc[i][j];
        os << "\n";
    }
    return os.str();
}

} // namespace lego
