#pragma once

// ROC analysis. AUC is the Mann-Whitney statistic with ties counted as half.

#include "dataset.hpp"
#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdvit {

struct ScoredSet {
    std::vector<double> scores;
    std::vector<int> labels;  // 0 or 1

    void validate() const {
        if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
        for (int l : labels) {
            if (l != 0 && l != 1) throw std::invalid_argument("labels must be 0 or 1");
        }
    }
    std::size_t positives() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }
    std::size_t negatives() const { return labels.size() - positives(); }
};

class UndefinedAuc : public std::domain_error {
   public:
    UndefinedAuc() : std::domain_error("AUC undefined: both classes must be present") {}
};

/// Rank-sum AUC in O(n log n); tied scores share their average rank.
inline double roc_auc(const ScoredSet& s) {
    s.validate();
    const std::size_t pos = s.positives(), neg = s.negatives();
    if (pos == 0 || neg == 0) throw UndefinedAuc();
    std::vector<std::size_t> order(s.scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
    double rank_sum = 0.0;  // ranks doubled to stay integral
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && s.scores[order[j]] == s.scores[order[i]]) ++j;
        const double twice_avg_rank = static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (s.labels[order[k]] == 1) rank_sum += twice_avg_rank;
        i = j;
    }
    const double u = rank_sum / 2.0 - static_cast<double>(pos) * static_cast<double>(pos + 1) / 2.0;
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

struct RocPoint {
    double threshold;  // scores >= threshold are called positive
    double fpr;
    double tpr;
};

/// One point per distinct score (descending), bracketed by (0,0) and (1,1).
inline std::vector<RocPoint> roc_curve(const ScoredSet& s) {
    s.validate();
    const std::size_t pos = s.positives(), neg = s.negatives();
    if (pos == 0 || neg == 0) throw UndefinedAuc();
    std::vector<std::size_t> order(s.scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
    std::vector<RocPoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double thr = s.scores[order[i]];
        while (i < order.size() && s.scores[order[i]] == thr) (s.labels[order[i++]] == 1 ? tp : fp)++;
        out.push_back({thr, static_cast<double>(fp) / static_cast<double>(neg),
                       static_cast<double>(tp) / static_cast<double>(pos)});
    }
    return out;
}

inline double trapezoid_area(const std::vector<RocPoint>& curve) {
    double area = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
    }
    return area;
}

/// AUC, or NaN when one class is absent.
inline double roc_auc_or_nan(const ScoredSet& s) {
    if (s.positives() == 0 || s.negatives() == 0) return std::numeric_limits<double>::quiet_NaN();
    return roc_auc(s);
}

struct EvalReport {
    ScoredSet scored;
    double auc = std::numeric_limits<double>::quiet_NaN();
    double accuracy = 0.0;
    std::vector<RocPoint> roc;
};

/// Classifies every labeled sample (no augmentation) and summarizes.
template <typename T>
EvalReport evaluate(const ModelParams<T>& params, const Dataset& data) {
    if (!params.has_classifier) throw std::invalid_argument("checkpoint missing classifier head");
    EvalReport r;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        const auto& s = data.samples[i];
        if (!s.label) throw std::invalid_argument("sample " + std::to_string(i) + " has no label");
        const double p = forward_classify(s, params);
        const int y = static_cast<int>(*s.label);
        r.scored.scores.push_back(p);
        r.scored.labels.push_back(y);
        correct += static_cast<std::size_t>((p >= 0.5 ? 1 : 0) == y);
    }
    r.accuracy = data.samples.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.samples.size());
    if (r.scored.positives() && r.scored.negatives()) {
        r.auc = roc_auc(r.scored);
        r.roc = roc_curve(r.scored);
    }
    return r;
}

inline std::string format_real(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void write_scores_csv(const std::string& path, const ScoredSet& s) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "sample_id,label,score\n";
    for (std::size_t i = 0; i < s.scores.size(); ++i) out << i << ',' << s.labels[i] << ',' << format_real(s.scores[i]) << '\n';
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

inline void write_roc_csv(const std::string& path, const std::vector<RocPoint>& roc) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "threshold,fpr,tpr\n";
    for (const auto& p : roc) out << (std::isinf(p.threshold) ? "inf" : format_real(p.threshold)) << ','
                                  << format_real(p.fpr) << ',' << format_real(p.tpr) << '\n';
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

}  // namespace tdvit
