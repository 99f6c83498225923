#pragma once

// Overlap metrics, threshold sweeps (ROC and precision-recall), the operating
// point closest to perfect precision and recall, and the report formats.
//
// Every sweep uses the predicate "score > threshold".

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "femseg/data.hpp"

namespace femseg {

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::size_t total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts confusion(const MaskVolume& pred, const MaskVolume& truth) {
    if (!pred.grid.same_extents(truth.grid))
        throw ShapeError(cat("confusion: prediction grid ", to_string(pred.grid), " differs from truth grid ",
                             to_string(truth.grid), "; resample explicitly first"));
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        const bool p = pred.values[i] != 0, t = truth.values[i] != 0;
        if (p && t) ++c.tp;
        else if (p) ++c.fp;
        else if (t) ++c.fn;
        else ++c.tn;
    }
    return c;
}

/// True when neither mask has a foreground voxel, where the DSC is 0/0.
inline bool both_empty(const ConfusionCounts& c) { return c.tp + c.fp + c.fn == 0; }

/// 2TP / (FP + 2TP + FN); two empty masks count as identical (1.0, see both_empty).
inline double dsc(const ConfusionCounts& c) {
    if (both_empty(c)) return 1.0;
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(c.fp + 2 * c.tp + c.fn);
}

namespace detail {
inline std::optional<double> ratio(std::size_t num, std::size_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace detail

inline std::optional<double> sensitivity(const ConfusionCounts& c) { return detail::ratio(c.tp, c.tp + c.fn); }
inline std::optional<double> recall(const ConfusionCounts& c) { return sensitivity(c); }
inline std::optional<double> specificity(const ConfusionCounts& c) { return detail::ratio(c.tn, c.tn + c.fp); }
inline std::optional<double> precision(const ConfusionCounts& c) { return detail::ratio(c.tp, c.tp + c.fp); }

// ---------------------------------------------------------------------------
// Threshold sweeps

struct CurvePoint {
    double threshold = 0;
    double recall = 0;     // = TPR
    double precision = 1;  // 1 when nothing is predicted positive
    double fpr = 0;
    double tpr = 0;
};

/// Pooled scored voxels, sorted once for repeated sweeps.
class ScoredVoxels {
public:
    ScoredVoxels() = default;

    void add(const ProbabilityMap& map, const MaskVolume& truth) {
        if (!map.grid.same_extents(truth.grid))
            throw ShapeError(cat("scored voxels: map grid ", to_string(map.grid), " differs from truth grid ",
                                 to_string(truth.grid)));
        for (std::size_t i = 0; i < map.values.size(); ++i) add(map.values[i], truth.values[i] != 0);
    }
    void add(double score, bool positive) {
        (positive ? pos_ : neg_).push_back(score);
        sorted_ = false;
    }

    std::size_t positives() const { return pos_.size(); }
    std::size_t negatives() const { return neg_.size(); }

    /// Counts at one threshold.
    ConfusionCounts counts_above(double t) const {
        sort();
        ConfusionCounts c;
        c.tp = above(pos_, t);
        c.fp = above(neg_, t);
        c.fn = pos_.size() - c.tp;
        c.tn = neg_.size() - c.fp;
        return c;
    }

    /// {0} + every distinct score + {1}, ascending.
    std::vector<double> thresholds() const {
        std::vector<double> t{0.0, 1.0};
        t.insert(t.end(), pos_.begin(), pos_.end());
        t.insert(t.end(), neg_.begin(), neg_.end());
        std::sort(t.begin(), t.end());
        t.erase(std::unique(t.begin(), t.end()), t.end());
        return t;
    }

    std::vector<CurvePoint> sweep(std::span<const double> thresholds) const {
        std::vector<CurvePoint> pts;
        pts.reserve(thresholds.size());
        for (double t : thresholds) {
            const auto c = counts_above(t);
            CurvePoint p;
            p.threshold = t;
            p.tpr = p.recall = recall(c).value_or(0.0);
            p.fpr = detail::ratio(c.fp, c.fp + c.tn).value_or(0.0);
            p.precision = precision(c).value_or(1.0);
            pts.push_back(p);
        }
        return pts;
    }

private:
    static std::size_t above(const std::vector<double>& v, double t) {
        return static_cast<std::size_t>(v.end() - std::upper_bound(v.begin(), v.end(), t));
    }
    void sort() const {
        if (sorted_) return;
        std::sort(pos_.begin(), pos_.end());
        std::sort(neg_.begin(), neg_.end());
        sorted_ = true;
    }

    mutable std::vector<double> pos_, neg_;
    mutable bool sorted_ = true;
};

struct RocCurve {
    std::vector<CurvePoint> points;  // ascending threshold
    double auc = 0;
};

struct PrCurve {
    std::vector<CurvePoint> points;  // ascending threshold
    double ap = 0;
};

/// Trapezoidal area under (FPR, TPR), anchored at (0, 0) and (1, 1).
inline double roc_auc(const std::vector<CurvePoint>& pts) {
    std::vector<std::pair<double, double>> xy{{0.0, 0.0}, {1.0, 1.0}};
    for (const auto& p : pts) xy.emplace_back(p.fpr, p.tpr);
    std::sort(xy.begin(), xy.end());
    double area = 0;
    for (std::size_t i = 1; i < xy.size(); ++i)
        area += (xy[i].first - xy[i - 1].first) * (xy[i].second + xy[i - 1].second) / 2;
    return area;
}

/// Step sum of precision over recall increments, from the highest threshold down.
inline double average_precision(const std::vector<CurvePoint>& ascending) {
    double ap = 0, prev = 0;
    for (auto it = ascending.rbegin(); it != ascending.rend(); ++it) {
        if (it->recall > prev) {
            ap += (it->recall - prev) * it->precision;
            prev = it->recall;
        }
    }
    return ap;
}

inline RocCurve roc_curve(const ScoredVoxels& sv) {
    if (sv.positives() == 0 || sv.negatives() == 0)
        throw std::invalid_argument("roc_curve: ground truth must contain both classes");
    RocCurve r;
    r.points = sv.sweep(sv.thresholds());
    r.auc = roc_auc(r.points);
    return r;
}

inline PrCurve pr_curve(const ScoredVoxels& sv) {
    if (sv.positives() == 0) throw std::invalid_argument("pr_curve: ground truth has no positive voxels");
    PrCurve r;
    r.points = sv.sweep(sv.thresholds());
    r.ap = average_precision(r.points);
    return r;
}

/// Threshold of the point nearest (recall 1, precision 1); ties go to higher recall.
inline double optimal_threshold(const std::vector<CurvePoint>& pts) {
    if (pts.empty()) throw std::invalid_argument("optimal_threshold: empty curve");
    const CurvePoint* best = nullptr;
    double best_d = 0;
    for (const auto& p : pts) {
        const double d = std::hypot(1.0 - p.recall, 1.0 - p.precision);
        if (!best || d < best_d || (d == best_d && p.recall > best->recall)) {
            best = &p;
            best_d = d;
        }
    }
    return best->threshold;
}

/// Thresholds 0, 1/(n-1), ..., 1 shared by all folds so that curves can be averaged.
inline std::vector<double> threshold_grid(std::size_t n = 1001) {
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = static_cast<double>(i) / static_cast<double>(n - 1);
    return g;
}

/// Pointwise mean of curves sampled on the same thresholds.
inline std::vector<CurvePoint> mean_curve(const std::vector<std::vector<CurvePoint>>& curves) {
    if (curves.empty()) return {};
    std::vector<CurvePoint> out(curves.front().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        CurvePoint& m = out[i];
        m = {curves.front()[i].threshold, 0, 0, 0, 0};
        for (const auto& c : curves) {
            if (c.size() != out.size() || c[i].threshold != m.threshold)
                throw std::invalid_argument("mean_curve: curves use different thresholds");
            m.recall += c[i].recall;
            m.precision += c[i].precision;
            m.fpr += c[i].fpr;
            m.tpr += c[i].tpr;
        }
        const double k = static_cast<double>(curves.size());
        m.recall /= k;
        m.precision /= k;
        m.fpr /= k;
        m.tpr /= k;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports

struct MeanSd {
    double mean = 0, sd = 0;
    std::size_t n = 0;
};

/// Mean and sample standard deviation (n - 1); sd is 0 for a single value.
inline MeanSd mean_sd(std::span<const double> v) {
    MeanSd r;
    r.n = v.size();
    if (v.empty()) return r;
    r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0;
        for (double x : v) ss += (x - r.mean) * (x - r.mean);
        r.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return r;
}

struct SubjectMetrics {
    std::string subject;
    int fold = 0;
    double threshold = 0.5;
    ConfusionCounts counts;

    double dsc() const { return femseg::dsc(counts); }
    std::optional<double> precision() const { return femseg::precision(counts); }
    std::optional<double> recall() const { return femseg::recall(counts); }
    std::optional<double> specificity() const { return femseg::specificity(counts); }
};

struct FoldCurves {
    int fold = 0;
    double threshold = 0.5;
    double auc = 0;
    double ap = 0;
    std::vector<CurvePoint> grid;  // sampled on threshold_grid()
};

/// Per-subject rows of one architecture plus its per-fold curve summaries.
struct EvalReport {
    std::string label;  // e.g. "3D CNN, F:8, L:2"
    std::vector<SubjectMetrics> subjects;
    std::vector<FoldCurves> folds;

    template <class Get>
    MeanSd aggregate(Get get) const {
        std::vector<double> v;
        for (const auto& s : subjects)
            if (const std::optional<double> x = get(s)) v.push_back(*x);
        return mean_sd(v);
    }
    MeanSd dsc() const { return aggregate([](const SubjectMetrics& s) { return std::optional<double>(s.dsc()); }); }
    MeanSd precision() const { return aggregate([](const SubjectMetrics& s) { return s.precision(); }); }
    MeanSd recall() const { return aggregate([](const SubjectMetrics& s) { return s.recall(); }); }
    MeanSd specificity() const { return aggregate([](const SubjectMetrics& s) { return s.specificity(); }); }
    MeanSd auc() const {
        std::vector<double> v;
        for (const auto& f : folds) v.push_back(f.auc);
        return mean_sd(v);
    }
    MeanSd ap() const {
        std::vector<double> v;
        for (const auto& f : folds) v.push_back(f.ap);
        return mean_sd(v);
    }

    /// Subjects whose metrics had an undefined ratio, with a note per case.
    std::vector<std::string> warnings() const {
        std::vector<std::string> w;
        for (const auto& s : subjects) {
            if (both_empty(s.counts)) w.push_back(cat(s.subject, ": both masks empty, DSC taken as 1.0"));
            if (!s.precision()) w.push_back(cat(s.subject, ": no predicted foreground, precision excluded"));
            if (!s.recall()) w.push_back(cat(s.subject, ": no true foreground, recall excluded"));
            if (!s.specificity()) w.push_back(cat(s.subject, ": no true background, specificity excluded"));
        }
        return w;
    }
};

inline std::string format_fixed(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string format_mean_sd(const MeanSd& m, int digits = 3) {
    return format_fixed(m.mean, digits) + "±" + format_fixed(m.sd, digits);
}

/// Plain-text table with the columns Network | DSC | Precision | Recall.
inline std::string format_table(const std::vector<EvalReport>& reports) {
    std::size_t width = std::string("Network").size();
    for (const auto& r : reports) width = std::max(width, r.label.size());
    auto pad = [width](const std::string& s) { return s + std::string(width - s.size(), ' '); };
    std::ostringstream os;
    os << pad("Network") << " | DSC         | Precision   | Recall\n";
    os << std::string(width, '-') << "-|-------------|-------------|------------\n";
    for (const auto& r : reports)
        os << pad(r.label) << " | " << format_mean_sd(r.dsc()) << " | " << format_mean_sd(r.precision()) << " | "
           << format_mean_sd(r.recall()) << '\n';
    return os.str();
}

namespace detail {
inline std::string csv_opt(const std::optional<double>& v) { return v ? format_fixed(*v, 6) : std::string{}; }
}  // namespace detail

/// Per-subject rows followed by one aggregate (mean) row.
inline std::string report_csv(const EvalReport& r) {
    std::ostringstream os;
    os << "network,subject,fold,threshold,tp,fp,fn,tn,dsc,precision,recall,specificity\n";
    for (const auto& s : r.subjects)
        os << '"' << r.label << "\"," << s.subject << ',' << s.fold << ',' << format_fixed(s.threshold, 6) << ','
           << s.counts.tp << ',' << s.counts.fp << ',' << s.counts.fn << ',' << s.counts.tn << ','
           << format_fixed(s.dsc(), 6) << ',' << detail::csv_opt(s.precision()) << ',' << detail::csv_opt(s.recall())
           << ',' << detail::csv_opt(s.specificity()) << '\n';
    os << '"' << r.label << "\",mean,,,,,,," << format_fixed(r.dsc().mean, 6) << ','
       << format_fixed(r.precision().mean, 6) << ',' << format_fixed(r.recall().mean, 6) << ','
       << format_fixed(r.specificity().mean, 6) << '\n';
    return os.str();
}

inline std::string curve_csv(const std::vector<CurvePoint>& pts) {
    std::ostringstream os;
    os << "threshold,recall,precision,fpr,tpr\n";
    for (const auto& p : pts)
        os << format_fixed(p.threshold, 6) << ',' << format_fixed(p.recall, 6) << ',' << format_fixed(p.precision, 6)
           << ',' << format_fixed(p.fpr, 6) << ',' << format_fixed(p.tpr, 6) << '\n';
    return os.str();
}

inline std::vector<CurvePoint> parse_curve_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line.rfind("threshold,recall,precision,fpr,tpr", 0) != 0)
        throw FormatError("curve csv: expected header threshold,recall,precision,fpr,tpr");
    std::vector<CurvePoint> pts;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        CurvePoint p;
        if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf", &p.threshold, &p.recall, &p.precision, &p.fpr, &p.tpr) != 5)
            throw FormatError(cat("curve csv: malformed row '", line, "'"));
        pts.push_back(p);
    }
    return pts;
}

/// One named polyline of a plot.
struct Series {
    std::string name;
    std::vector<std::pair<double, double>> xy;
};

/// Unit-square line plot (both axes span [0, 1]).
inline std::string render_svg(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series) {
    constexpr double W = 480, H = 420, L = 60, R = 20, T = 40, B = 50;
    static constexpr const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    auto px = [&](double x) { return L + x * (W - L - R); };
    auto py = [&](double y) { return H - B - y * (H - T - B); };
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
    os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double v = i / 5.0;
        os << "<text x=\"" << px(v) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << format_fixed(v, 1) << "</text>\n";
        os << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << format_fixed(v, 1) << "</text>\n";
    }
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
    os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (T + H - B) / 2
       << ")\">" << ylabel << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = colors[s % std::size(colors)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : series[s].xy) os << format_fixed(px(x), 2) << ',' << format_fixed(py(y), 2) << ' ';
        os << "\"/>\n";
        os << "<text x=\"" << L + 10 << "\" y=\"" << T + 16 + 16 * static_cast<double>(s) << "\" fill=\"" << color << "\">"
           << series[s].name << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

inline Series roc_series(const std::string& name, const std::vector<CurvePoint>& pts) {
    Series s{name, {}};
    for (const auto& p : pts) s.xy.emplace_back(p.fpr, p.tpr);
    std::sort(s.xy.begin(), s.xy.end());
    return s;
}

inline Series pr_series(const std::string& name, const std::vector<CurvePoint>& pts) {
    Series s{name, {}};
    for (const auto& p : pts) s.xy.emplace_back(p.recall, p.precision);
    std::sort(s.xy.begin(), s.xy.end());
    return s;
}

}  // namespace femseg
