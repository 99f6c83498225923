#pragma once

// End-to-end experiment: preprocessing, per-fold training, held-out
// inference, threshold selection and the cross-validation reports.

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <thread>

#include "femseg/checkpoint.hpp"
#include "femseg/inference.hpp"
#include "femseg/metrics.hpp"
#include "femseg/training.hpp"

namespace femseg {

struct PreprocessConfig {
    std::optional<std::size_t> slab;                       // keep the central n slices
    std::optional<std::array<std::size_t, 2>> resample;    // in-plane (x, y) for the network
};

/// One subject on the evaluation grid (`truth`) and on the network grid (`input`, `target`).
struct Subject {
    std::string id;
    Laterality laterality = Laterality::left;
    MaskVolume truth;
    Volume input;  // normalized intensities
    MaskVolume target;
};

inline Subject prepare_subject(std::string id, Laterality side, const Volume& image, const MaskVolume& mask,
                               const PreprocessConfig& pre) {
    if (!image.grid.same_extents(mask.grid))
        throw ShapeError(cat("subject ", id, ": image grid ", to_string(image.grid), " differs from mask grid ",
                             to_string(mask.grid)));
    Subject s;
    s.id = std::move(id);
    s.laterality = side;
    Volume img = pre.slab ? central_slab(image, *pre.slab) : image;
    s.truth = pre.slab ? central_slab(mask, *pre.slab) : mask;
    for (auto& v : s.truth.values) v = v ? 1 : 0;
    s.target = s.truth;
    if (pre.resample) {
        const auto [nx, ny] = *pre.resample;
        img = bicubic_resample(img, nx, ny);
        s.target = resample_nearest(s.truth, nx, ny);
    }
    s.input = normalize(img);
    return s;
}

inline std::vector<Subject> load_dataset(const Manifest& m, const PreprocessConfig& pre) {
    std::vector<Subject> out;
    for (const auto& e : m)
        out.push_back(prepare_subject(e.subject, e.laterality, read_volume<float>(e.image),
                                      read_volume<std::uint8_t>(e.mask), pre));
    return out;
}

/// Maps a probability map from the network grid onto the subject's evaluation grid.
inline ProbabilityMap to_truth_grid(const ProbabilityMap& map, const Subject& s) {
    if (map.grid.same_extents(s.truth.grid)) return map;
    return resample_nearest(map, s.truth.grid.nx(), s.truth.grid.ny());
}

// ---------------------------------------------------------------------------
// Training samples

/// 3D: the whole (zero-padded) volume. 2D: one mirrored slice triplet per slice,
/// padded so that the network output covers the slice; labels beyond the
/// slice border are mirrored with the image.
template <class T>
std::vector<Sample<T>> make_samples(const Subject& s, const UNetConfig& cfg) {
    const Grid& g = s.input.grid;
    std::vector<Sample<T>> out;
    if (cfg.rank == 3) {
        const std::size_t unit = std::size_t{1} << cfg.levels;
        auto up = [unit](std::size_t n) { return (n + unit - 1) / unit * unit; };
        const std::size_t px = up(g.nx()), py = up(g.ny()), ps = up(g.slices());
        Sample<T> sm{Tensor<T>({1, 1, ps, py, px}), std::vector<std::uint8_t>(ps * py * px, 0)};
        for (std::size_t z = 0; z < g.slices(); ++z)
            for (std::size_t y = 0; y < g.ny(); ++y)
                for (std::size_t x = 0; x < g.nx(); ++x) {
                    sm.input[(z * py + y) * px + x] = static_cast<T>(s.input.at(x, y, z));
                    sm.target[(z * py + y) * px + x] = s.target.at(x, y, z);
                }
        out.push_back(std::move(sm));
        return out;
    }
    const SizePair sy = valid_sizes(cfg.levels, g.ny()), sx = valid_sizes(cfg.levels, g.nx());
    const Margin my{(sy.input - sy.output) / 2, sy.input - g.ny() - (sy.input - sy.output) / 2};
    const Margin mx{(sx.input - sx.output) / 2, sx.input - g.nx() - (sx.input - sx.output) / 2};
    for (std::size_t z = 0; z < g.slices(); ++z) {
        Sample<T> sm{mirror_pad(slice_triplets<T>(s.input, z), {my, mx}), {}};
        sm.target.resize(sy.output * sx.output);
        for (std::size_t y = 0; y < sy.output; ++y)
            for (std::size_t x = 0; x < sx.output; ++x)
                sm.target[y * sx.output + x] =
                    s.target.at(reflect_index(static_cast<long>(x), g.nx()), reflect_index(static_cast<long>(y), g.ny()), z);
        out.push_back(std::move(sm));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation of one fold

struct FoldEval {
    FoldCurves curves;
    std::vector<SubjectMetrics> plain;
    std::vector<SubjectMetrics> post;  // after largest-component filtering
};

/// Chooses the PR-optimal threshold on the fold's pooled voxels and scores each subject.
inline FoldEval evaluate_fold(int fold, const std::vector<const Subject*>& subjects,
                              const std::vector<ProbabilityMap>& maps, bool postprocess) {
    ScoredVoxels sv;
    for (std::size_t i = 0; i < subjects.size(); ++i) sv.add(maps[i], subjects[i]->truth);
    FoldEval ev;
    ev.curves.fold = fold;
    const PrCurve pr = pr_curve(sv);
    ev.curves.threshold = optimal_threshold(pr.points);
    ev.curves.ap = pr.ap;
    ev.curves.auc = roc_curve(sv).auc;
    const auto grid = threshold_grid();
    ev.curves.grid = sv.sweep(grid);
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        const MaskVolume pred = binarize(maps[i], ev.curves.threshold);
        ev.plain.push_back({subjects[i]->id, fold, ev.curves.threshold, confusion(pred, subjects[i]->truth)});
        if (postprocess)
            ev.post.push_back(
                {subjects[i]->id, fold, ev.curves.threshold, confusion(largest_component(pred), subjects[i]->truth)});
    }
    return ev;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct ExperimentConfig {
    UNetConfig model = UNetConfig::volumetric();
    TrainConfig train;
    std::size_t folds = 4;
    std::uint64_t seed = 1;
    std::size_t threads = 1;
    bool postprocess = false;
    std::optional<std::filesystem::path> out_dir;  // per-fold logs and checkpoints
};

/// A fold that failed; carries the fold id.
class FoldError : public std::runtime_error {
public:
    FoldError(int fold, const std::string& what) : std::runtime_error(cat("fold ", fold, ": ", what)), fold_(fold) {}
    int fold() const noexcept { return fold_; }

private:
    int fold_;
};

template <class T>
struct FoldOutcome {
    int fold = 0;
    std::vector<std::string> validation;
    TrainResult<T> training;
    FoldEval eval;
};

template <class T>
struct CvResult {
    FoldSplit split;
    std::vector<FoldOutcome<T>> folds;
    std::vector<EvalReport> reports;  // plain first, then post-processed when enabled
};

template <class T>
FoldOutcome<T> run_fold(const std::vector<Subject>& data, const FoldSplit& split, int fold, const ExperimentConfig& ex) {
    FoldOutcome<T> out;
    out.fold = fold;
    out.validation = split.folds[static_cast<std::size_t>(fold)];
    std::vector<Sample<T>> training, validation;
    std::vector<const Subject*> held_out;
    for (const auto& s : data) {
        auto samples = make_samples<T>(s, ex.model);
        const bool is_val = split.fold_of(s.id) == fold;
        auto& dst = is_val ? validation : training;
        std::move(samples.begin(), samples.end(), std::back_inserter(dst));
        if (is_val) held_out.push_back(&s);
    }
    TrainConfig tc = ex.train;
    tc.seed = derive_seed(ex.seed, 2000 + static_cast<std::uint64_t>(fold));
    std::ofstream log_csv;
    std::filesystem::path dir;
    if (ex.out_dir) {
        dir = *ex.out_dir / cat("fold", fold);
        std::filesystem::create_directories(dir);
        log_csv.open(dir / "train_log.csv", std::ios::trunc);
        log_csv << "epoch,train_loss,val_accuracy\n";
    }
    out.training = train(build<T>(ex.model, derive_seed(ex.seed, 1000 + static_cast<std::uint64_t>(fold))), ex.model, tc,
                         training, validation, [&](const EpochRecord& r) {
                             log(LogLevel::info, cat("fold ", fold, " epoch ", r.epoch, ": loss ", format_fixed(r.train_loss, 6),
                                                     ", validation accuracy ", format_fixed(r.val_accuracy, 5), " (",
                                                     format_fixed(r.seconds, 1), " s)"));
                             if (log_csv)
                                 log_csv << r.epoch << ',' << format_fixed(r.train_loss, 8) << ','
                                         << format_fixed(r.val_accuracy, 8) << '\n';
                         });
    if (ex.out_dir) save_checkpoint(out.training.best, ex.model, dir / "model.ckpt");
    std::vector<ProbabilityMap> maps;
    for (const Subject* s : held_out) maps.push_back(to_truth_grid(predict_volume(out.training.best, ex.model, s->input), *s));
    out.eval = evaluate_fold(fold, held_out, maps, ex.postprocess);
    return out;
}

/// Trains and evaluates one model per fold; folds may run on several threads
/// and the results do not depend on the thread count.
template <class T>
CvResult<T> run_cross_validation(const std::vector<Subject>& data, const FoldSplit& split, const ExperimentConfig& ex) {
    if (split.k() < 2) throw std::invalid_argument("cross-validation requires k >= 2");
    ex.model.validate();
    ex.train.validate();
    CvResult<T> result;
    result.split = split;
    const std::size_t k = split.k();
    result.folds.resize(k);
    std::vector<std::exception_ptr> errors(k);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t f; (f = next++) < k;) {
            try {
                result.folds[f] = run_fold<T>(data, split, static_cast<int>(f), ex);
            } catch (...) {
                errors[f] = std::current_exception();
            }
        }
    };
    const std::size_t workers = std::clamp<std::size_t>(ex.threads, 1, k);
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(worker);
    }
    for (std::size_t f = 0; f < k; ++f) {
        if (!errors[f]) continue;
        try {
            std::rethrow_exception(errors[f]);
        } catch (const std::exception& e) {
            throw FoldError(static_cast<int>(f), e.what());
        }
    }
    EvalReport plain{ex.model.label(), {}, {}};
    EvalReport post{ex.model.label(true), {}, {}};
    for (const auto& f : result.folds) {
        plain.subjects.insert(plain.subjects.end(), f.eval.plain.begin(), f.eval.plain.end());
        post.subjects.insert(post.subjects.end(), f.eval.post.begin(), f.eval.post.end());
        plain.folds.push_back(f.eval.curves);
        post.folds.push_back(f.eval.curves);
    }
    result.reports.push_back(std::move(plain));
    if (ex.postprocess) result.reports.push_back(std::move(post));
    return result;
}

template <class T>
CvResult<T> run_cross_validation(const std::vector<Subject>& data, const ExperimentConfig& ex) {
    Manifest m;
    for (const auto& s : data) m.push_back({s.id, s.laterality, {}, {}, std::nullopt});
    return run_cross_validation<T>(data, stratified_kfold(m, ex.folds, ex.seed), ex);
}

// ---------------------------------------------------------------------------
// Report files

inline std::string slug(const std::string& label) {
    std::string s;
    for (char c : label) {
        if (std::isalnum(static_cast<unsigned char>(c))) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        else if (!s.empty() && s.back() != '_') s += '_';
    }
    while (!s.empty() && s.back() == '_') s.pop_back();
    return s;
}

/// Writes the table, per-subject CSV, per-fold summary, mean curves and plots;
/// returns the files written. Contents depend only on the reports.
inline std::vector<std::filesystem::path> write_reports(const std::vector<EvalReport>& reports,
                                                        const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<fs::path> files;
    auto write = [&](const fs::path& name, const std::string& text) {
        std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
        out << text;
        if (!out) throw std::runtime_error(cat("cannot write ", (dir / name).string()));
        files.push_back(dir / name);
    };
    write("report.txt", format_table(reports));
    std::string csv;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const std::string part = report_csv(reports[i]);
        csv += i == 0 ? part : part.substr(part.find('\n') + 1);
    }
    write("report.csv", csv);
    std::ostringstream folds;
    folds << "network,fold,threshold,auc,ap\n";
    std::vector<Series> roc, pr;
    for (const auto& r : reports) {
        for (const auto& f : r.folds)
            folds << '"' << r.label << "\"," << f.fold << ',' << format_fixed(f.threshold, 6) << ','
                  << format_fixed(f.auc, 6) << ',' << format_fixed(f.ap, 6) << '\n';
        std::vector<std::vector<CurvePoint>> grids;
        for (const auto& f : r.folds) grids.push_back(f.grid);
        const auto mean = mean_curve(grids);
        write(slug(r.label) + "_mean_curve.csv", curve_csv(mean));
        roc.push_back(roc_series(cat(r.label, " (AUC ", format_mean_sd(r.auc()), ")"), mean));
        pr.push_back(pr_series(cat(r.label, " (AP ", format_mean_sd(r.ap()), ")"), mean));
    }
    write("folds.csv", folds.str());
    write("roc.svg", render_svg("Mean ROC curve", "False positive rate", "True positive rate", roc));
    write("prc.svg", render_svg("Mean precision-recall curve", "Recall", "Precision", pr));
    return files;
}

}  // namespace femseg
