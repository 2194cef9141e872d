#pragma once

// Downstream evaluation of embeddings: stratified k-fold classification with simple learners,
// k-means, and partition metrics (Davies-Bouldin, NMI, ARI).

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "doufu/nn.hpp"
#include "doufu/util.hpp"

namespace doufu::eval {

using Rows = std::vector<std::vector<double>>;
using Labels = std::vector<std::size_t>;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline Mat to_matrix(const Rows& rows) {
    if (rows.empty()) return Mat(0, 0);
    Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows.front().size()) throw ShapeError("ragged embedding rows");
        for (std::size_t j = 0; j < rows[i].size(); ++j) {
            if (!std::isfinite(rows[i][j])) throw NumericError("non-finite embedding value in row " + std::to_string(i));
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Classification metrics

inline double accuracy(const Labels& pred, const Labels& truth) {
    if (pred.size() != truth.size()) throw ShapeError("prediction and truth lengths differ");
    if (truth.empty()) throw ValidationError("labels", "empty input");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
    return static_cast<double>(hit) / static_cast<double>(truth.size());
}

/// Mean over classes (union of predicted and true labels) of per-class F1; 0/0 counts as 0.
inline double macro_f1(const Labels& pred, const Labels& truth) {
    if (pred.size() != truth.size()) throw ShapeError("prediction and truth lengths differ");
    if (truth.empty()) throw ValidationError("labels", "empty input");
    std::set<std::size_t> classes(truth.begin(), truth.end());
    classes.insert(pred.begin(), pred.end());
    double total = 0.0;
    for (auto c : classes) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            tp += pred[i] == c && truth[i] == c;
            fp += pred[i] == c && truth[i] != c;
            fn += pred[i] != c && truth[i] == c;
        }
        const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
        const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        total += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    }
    return total / static_cast<double>(classes.size());
}

// ---------------------------------------------------------------------------
// Partition metrics

namespace detail {

inline std::vector<std::size_t> relabel(const Labels& a) {
    std::map<std::size_t, std::size_t> ids;
    std::vector<std::size_t> out;
    for (auto v : a) out.push_back(ids.emplace(v, ids.size()).first->second);
    return out;
}

struct Contingency {
    std::vector<std::vector<double>> n;
    std::vector<double> rows, cols;
    double total = 0;
};

inline Contingency contingency(const Labels& a, const Labels& b) {
    if (a.size() != b.size()) throw ShapeError("partitions have different lengths");
    if (a.empty()) throw ValidationError("labels", "empty input");
    auto ra = relabel(a), rb = relabel(b);
    const auto ka = *std::max_element(ra.begin(), ra.end()) + 1, kb = *std::max_element(rb.begin(), rb.end()) + 1;
    Contingency c{std::vector<std::vector<double>>(ka, std::vector<double>(kb, 0.0)), std::vector<double>(ka, 0.0),
                  std::vector<double>(kb, 0.0), static_cast<double>(a.size())};
    for (std::size_t i = 0; i < a.size(); ++i) {
        c.n[ra[i]][rb[i]] += 1;
        c.rows[ra[i]] += 1;
        c.cols[rb[i]] += 1;
    }
    return c;
}

inline double comb2(double x) { return x * (x - 1) / 2; }

} // namespace detail

/// I(a; b) / ((H(a) + H(b)) / 2), natural log; 0/0 gives 0.
inline double nmi(const Labels& a, const Labels& b) {
    auto c = detail::contingency(a, b);
    auto entropy = [&](const std::vector<double>& m) {
        double h = 0;
        for (double v : m)
            if (v > 0) h -= v / c.total * std::log(v / c.total);
        return h;
    };
    double mi = 0;
    for (std::size_t i = 0; i < c.rows.size(); ++i)
        for (std::size_t j = 0; j < c.cols.size(); ++j) {
            const double v = c.n[i][j];
            if (v > 0) mi += v / c.total * std::log(v * c.total / (c.rows[i] * c.cols[j]));
        }
    const double denom = (entropy(c.rows) + entropy(c.cols)) / 2;
    if (denom <= 0) return 0.0;
    return std::clamp(mi / denom, 0.0, 1.0);
}

/// Adjusted Rand index from the contingency table.
inline double ari(const Labels& a, const Labels& b) {
    auto c = detail::contingency(a, b);
    if (c.total < 2) throw ValidationError("labels", "ARI needs at least 2 items");
    double index = 0, sa = 0, sb = 0;
    for (const auto& row : c.n)
        for (double v : row) index += detail::comb2(v);
    for (double v : c.rows) sa += detail::comb2(v);
    for (double v : c.cols) sb += detail::comb2(v);
    const double expected = sa * sb / detail::comb2(c.total);
    const double max_index = (sa + sb) / 2;
    if (max_index == expected) return 1.0; // both partitions trivial (all one cluster or all singletons)
    return (index - expected) / (max_index - expected);
}

struct Partition {
    Labels assign;
    std::size_t k = 0;
    Mat centers; ///< k x dim
    double inertia = 0.0;
};

/// Centers as member means; throws if a cluster is empty.
inline Mat cluster_centers(const Mat& x, const Labels& assign, std::size_t k) {
    Mat c = Mat::Zero(static_cast<Eigen::Index>(k), x.cols());
    std::vector<double> count(k, 0.0);
    for (std::size_t i = 0; i < assign.size(); ++i) {
        if (assign[i] >= k) throw ValidationError("assign", "cluster id out of range");
        c.row(static_cast<Eigen::Index>(assign[i])) += x.row(static_cast<Eigen::Index>(i));
        count[assign[i]] += 1;
    }
    for (std::size_t j = 0; j < k; ++j) {
        if (count[j] == 0) throw ValidationError("assign", "cluster " + std::to_string(j) + " is empty");
        c.row(static_cast<Eigen::Index>(j)) /= count[j];
    }
    return c;
}

/// Mean over clusters of the worst (s_i + s_j) / d(c_i, c_j), s_i = mean member distance to center.
inline double davies_bouldin(const Rows& data, const Labels& assign) {
    if (data.size() != assign.size()) throw ShapeError("data and assignment lengths differ");
    const auto x = to_matrix(data);
    auto ids = detail::relabel(assign);
    const std::size_t k = ids.empty() ? 0 : *std::max_element(ids.begin(), ids.end()) + 1;
    if (k < 2) throw ValidationError("assign", "Davies-Bouldin needs at least 2 clusters");
    const auto c = cluster_centers(x, ids, k);
    std::vector<double> spread(k, 0.0), count(k, 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        spread[ids[i]] += (x.row(static_cast<Eigen::Index>(i)) - c.row(static_cast<Eigen::Index>(ids[i]))).norm();
        count[ids[i]] += 1;
    }
    for (std::size_t j = 0; j < k; ++j) spread[j] /= count[j];
    double total = 0;
    for (std::size_t i = 0; i < k; ++i) {
        double worst = 0;
        for (std::size_t j = 0; j < k; ++j) {
            if (i == j) continue;
            const double d = (c.row(static_cast<Eigen::Index>(i)) - c.row(static_cast<Eigen::Index>(j))).norm();
            if (d == 0) throw NumericError("clusters " + std::to_string(i) + " and " + std::to_string(j) + " have coincident centers");
            worst = std::max(worst, (spread[i] + spread[j]) / d);
        }
        total += worst;
    }
    return total / static_cast<double>(k);
}

/// k-means++ seeding, then Lloyd iterations until assignments stop changing (at most max_iter).
inline Partition kmeans(const Rows& data, std::size_t k, std::uint64_t seed, int max_iter = 300) {
    const auto x = to_matrix(data);
    const auto n = static_cast<std::size_t>(x.rows());
    if (k == 0 || k > n) throw ValidationError("k", "k = " + std::to_string(k) + " must be in [1, " + std::to_string(n) + "]");
    Rng rng(seed);
    auto sq = [&](std::size_t i, const Mat& c, std::size_t j) {
        return (x.row(static_cast<Eigen::Index>(i)) - c.row(static_cast<Eigen::Index>(j))).squaredNorm();
    };
    Mat centers(static_cast<Eigen::Index>(k), x.cols());
    std::vector<char> chosen(n, 0);
    std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    centers.row(0) = x.row(static_cast<Eigen::Index>(first));
    chosen[first] = 1;
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = sq(i, centers, 0);
    for (std::size_t j = 1; j < k; ++j) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::size_t pick = 0;
        if (total > 0) {
            pick = std::discrete_distribution<std::size_t>(d2.begin(), d2.end())(rng);
        } else {
            // every point coincides with a center already: take the next unused row
            while (chosen[pick]) ++pick;
        }
        chosen[pick] = 1;
        centers.row(static_cast<Eigen::Index>(j)) = x.row(static_cast<Eigen::Index>(pick));
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq(i, centers, j));
    }

    Partition p{Labels(n, k), k, centers, 0.0};
    for (int iter = 0; iter < max_iter; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < k; ++j) {
                const double d = sq(i, p.centers, j);
                if (d < bd) {
                    bd = d;
                    best = j;
                }
            }
            if (p.assign[i] != best) {
                p.assign[i] = best;
                changed = true;
            }
        }
        // An emptied cluster takes the point farthest from its current center.
        std::vector<std::size_t> count(k, 0);
        for (auto a : p.assign) ++count[a];
        for (std::size_t j = 0; j < k; ++j) {
            if (count[j] > 0) continue;
            std::size_t far = 0;
            double fd = -1;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = count[p.assign[i]] > 1 ? sq(i, p.centers, p.assign[i]) : -1;
                if (d > fd) {
                    fd = d;
                    far = i;
                }
            }
            --count[p.assign[far]];
            p.assign[far] = j;
            ++count[j];
            changed = true;
        }
        p.centers = cluster_centers(x, p.assign, k);
        if (!changed) break;
    }
    p.inertia = 0;
    for (std::size_t i = 0; i < n; ++i) p.inertia += sq(i, p.centers, p.assign[i]);
    return p;
}

// ---------------------------------------------------------------------------
// Learners

enum class Learner { logistic, ridge, naive_bayes, knn, mlp };

inline constexpr std::array<Learner, 5> all_learners{Learner::logistic, Learner::ridge, Learner::naive_bayes, Learner::knn,
                                                     Learner::mlp};

inline std::string learner_name(Learner l) {
    switch (l) {
    case Learner::logistic: return "logistic";
    case Learner::ridge: return "ridge";
    case Learner::naive_bayes: return "naive_bayes";
    case Learner::knn: return "knn";
    default: return "mlp";
    }
}

inline Learner parse_learner(const std::string& s) {
    for (auto l : all_learners)
        if (learner_name(l) == s) return l;
    throw ValidationError("learner", "unknown learner '" + s + "'");
}

namespace detail {

struct Scaler {
    Vec mean, scale;
    static Scaler fit(const Mat& x) {
        Scaler s{x.colwise().mean().transpose(), Vec(x.cols())};
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double sd = std::sqrt((x.col(j).array() - s.mean(j)).square().mean());
            s.scale(j) = sd > 1e-12 ? sd : 1.0;
        }
        return s;
    }
    Mat apply(const Mat& x) const {
        return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
    }
};

inline Labels argmax_rows(const Mat& scores) {
    Labels out(static_cast<std::size_t>(scores.rows()));
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        Eigen::Index j = 0;
        scores.row(i).maxCoeff(&j);
        out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(j);
    }
    return out;
}

inline Mat softmax_rows(Mat z) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        z.row(i).array() -= z.row(i).maxCoeff();
        z.row(i) = z.row(i).array().exp();
        z.row(i) /= z.row(i).sum();
    }
    return z;
}

inline Mat one_hot(const Labels& y, std::size_t classes, double off = 0.0) {
    Mat t = Mat::Constant(static_cast<Eigen::Index>(y.size()), static_cast<Eigen::Index>(classes), off);
    for (std::size_t i = 0; i < y.size(); ++i) t(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(y[i])) = 1.0;
    return t;
}

/// Multinomial logistic regression: 200 accelerated full-batch gradient steps of size 1/L,
/// L the Lipschitz bound of the (L2-regularized) cross-entropy gradient.
inline Labels logistic(const Mat& xtr, const Labels& ytr, const Mat& xte, std::size_t classes) {
    const auto sc = Scaler::fit(xtr);
    Mat x(xtr.rows(), xtr.cols() + 1);
    x << sc.apply(xtr), Vec::Ones(xtr.rows());
    const double n = static_cast<double>(x.rows()), lambda = 1e-3;
    const Mat y = one_hot(ytr, classes);
    const Mat gram = x.transpose() * x / n;
    Vec v = Vec::Ones(gram.rows());
    double top = 1.0;
    for (int it = 0; it < 100; ++it) {
        Vec w = gram * v;
        top = w.norm();
        if (top == 0) break;
        v = w / top;
    }
    const double step = 1.0 / (0.5 * top + lambda);
    Mat w = Mat::Zero(x.cols(), static_cast<Eigen::Index>(classes)), prev = w;
    for (int it = 1; it <= 200; ++it) {
        const Mat look = w + (static_cast<double>(it - 1) / static_cast<double>(it + 2)) * (w - prev);
        const Mat grad = x.transpose() * (softmax_rows(x * look) - y) / n + lambda * look;
        prev = w;
        w = look - step * grad;
    }
    Mat xt(xte.rows(), xte.cols() + 1);
    xt << sc.apply(xte), Vec::Ones(xte.rows());
    return argmax_rows(xt * w);
}

/// One-vs-rest ridge on {-1, +1} targets with an unpenalized intercept, lambda = 1.
inline Labels ridge(const Mat& xtr, const Labels& ytr, const Mat& xte, std::size_t classes) {
    const Vec xm = xtr.colwise().mean().transpose();
    const Mat xc = xtr.rowwise() - xm.transpose();
    const Mat y = one_hot(ytr, classes, -1.0);
    const Vec ym = y.colwise().mean().transpose();
    const Mat yc = y.rowwise() - ym.transpose();
    Mat a = xc.transpose() * xc;
    a.diagonal().array() += 1.0;
    const Mat w = a.ldlt().solve(xc.transpose() * yc);
    Mat scores = (xte.rowwise() - xm.transpose()) * w;
    scores.rowwise() += ym.transpose();
    return argmax_rows(scores);
}

/// Gaussian naive Bayes with variance smoothing of 1e-9 times the largest feature variance.
inline Labels naive_bayes(const Mat& xtr, const Labels& ytr, const Mat& xte, std::size_t classes) {
    const auto d = xtr.cols();
    double max_var = 0;
    for (Eigen::Index j = 0; j < d; ++j) max_var = std::max(max_var, (xtr.col(j).array() - xtr.col(j).mean()).square().mean());
    const double smooth = 1e-9 * std::max(max_var, 1e-300);
    Mat mean = Mat::Zero(static_cast<Eigen::Index>(classes), d), var = Mat::Zero(static_cast<Eigen::Index>(classes), d);
    std::vector<double> count(classes, 0.0);
    for (std::size_t i = 0; i < ytr.size(); ++i) {
        mean.row(static_cast<Eigen::Index>(ytr[i])) += xtr.row(static_cast<Eigen::Index>(i));
        count[ytr[i]] += 1;
    }
    for (std::size_t c = 0; c < classes; ++c)
        if (count[c] > 0) mean.row(static_cast<Eigen::Index>(c)) /= count[c];
    for (std::size_t i = 0; i < ytr.size(); ++i)
        var.row(static_cast<Eigen::Index>(ytr[i])).array() +=
            (xtr.row(static_cast<Eigen::Index>(i)) - mean.row(static_cast<Eigen::Index>(ytr[i]))).array().square();
    Mat scores(xte.rows(), static_cast<Eigen::Index>(classes));
    for (std::size_t c = 0; c < classes; ++c) {
        const auto ci = static_cast<Eigen::Index>(c);
        if (count[c] == 0) {
            scores.col(ci).setConstant(-std::numeric_limits<double>::infinity());
            continue;
        }
        const Eigen::ArrayXd v = var.row(ci).transpose().array() / count[c] + smooth;
        const double log_prior = std::log(count[c] / static_cast<double>(ytr.size()));
        const double log_norm = -0.5 * (2 * std::numbers::pi * v).log().sum();
        for (Eigen::Index i = 0; i < xte.rows(); ++i) {
            const Eigen::ArrayXd diff = xte.row(i).transpose().array() - mean.row(ci).transpose().array();
            scores(i, ci) = log_prior + log_norm - 0.5 * (diff.square() / v).sum();
        }
    }
    return argmax_rows(scores);
}

/// k nearest neighbors (Euclidean, raw features); ties go to the class with the nearer member.
inline Labels knn(const Mat& xtr, const Labels& ytr, const Mat& xte, std::size_t classes, std::size_t k = 5) {
    Labels out;
    const auto n = static_cast<std::size_t>(xtr.rows());
    const std::size_t kk = std::min(k, n);
    for (Eigen::Index i = 0; i < xte.rows(); ++i) {
        std::vector<std::pair<double, std::size_t>> dist;
        for (std::size_t j = 0; j < n; ++j) dist.push_back({(xtr.row(static_cast<Eigen::Index>(j)) - xte.row(i)).squaredNorm(), j});
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
        std::vector<int> votes(classes, 0);
        for (std::size_t r = 0; r < kk; ++r) ++votes[ytr[dist[r].second]];
        const int top = *std::max_element(votes.begin(), votes.end());
        for (std::size_t r = 0; r < kk; ++r)
            if (votes[ytr[dist[r].second]] == top) {
                out.push_back(ytr[dist[r].second]);
                break;
            }
    }
    return out;
}

/// One hidden ReLU layer of width 64, softmax output; 200 full-batch Adam steps on standardized inputs.
inline Labels mlp(const Mat& xtr, const Labels& ytr, const Mat& xte, std::size_t classes, std::uint64_t seed) {
    const auto sc = Scaler::fit(xtr);
    const auto to_tensor = [](const Mat& m) {
        nn::Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
        t.mat() = m;
        return t;
    };
    const auto x = to_tensor(sc.apply(xtr)), xt = to_tensor(sc.apply(xte));
    nn::ParamStore store(seed);
    nn::Linear l1(store, "mlp.l1", x.cols(), 64), l2(store, "mlp.l2", 64, classes);
    for (int it = 0; it < 200; ++it) {
        nn::Tape t;
        auto logits = l2(t, store, nn::relu(l1(t, store, t.constant(x))));
        t.backward(nn::cross_entropy(logits, ytr));
        nn::adam_step(store, {0.01});
    }
    nn::Tape t;
    auto logits = l2(t, store, nn::relu(l1(t, store, t.constant(xt))));
    return argmax_rows(logits.value().mat());
}

} // namespace detail

inline Labels fit_predict(Learner l, const Mat& xtr, const Labels& ytr, const Mat& xte, std::size_t classes, std::uint64_t seed) {
    if (xtr.rows() == 0) throw ValidationError("train", "no training rows");
    for (auto y : ytr)
        if (y >= classes) throw LookupError("label outside class range");
    switch (l) {
    case Learner::logistic: return detail::logistic(xtr, ytr, xte, classes);
    case Learner::ridge: return detail::ridge(xtr, ytr, xte, classes);
    case Learner::naive_bayes: return detail::naive_bayes(xtr, ytr, xte, classes);
    case Learner::knn: return detail::knn(xtr, ytr, xte, classes);
    default: return detail::mlp(xtr, ytr, xte, classes, seed);
    }
}

/// Fold id per row: each class is shuffled and dealt round-robin over the folds.
inline std::vector<std::size_t> stratified_folds(const Labels& y, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw ValidationError("folds", "need at least 2 folds");
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < y.size(); ++i) by_class[y[i]].push_back(i);
    std::vector<std::size_t> fold(y.size());
    Rng rng(seed);
    std::size_t offset = 0;
    for (auto& [c, idx] : by_class) {
        if (idx.size() < k)
            throw ValidationError("labels", "class " + std::to_string(c) + " has " + std::to_string(idx.size()) + " members, fewer than " +
                                                std::to_string(k) + " folds");
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t r = 0; r < idx.size(); ++r) fold[idx[r]] = (offset + r) % k;
        offset += idx.size();
    }
    return fold;
}

/// Predictions for the rows of fold `f`, fitted on all other rows only.
inline Labels fold_predictions(Learner l, const Rows& data, const Labels& y, const std::vector<std::size_t>& folds, std::size_t f,
                               std::uint64_t seed) {
    const auto x = to_matrix(data);
    std::vector<Eigen::Index> tr, te;
    for (std::size_t i = 0; i < y.size(); ++i) (folds[i] == f ? te : tr).push_back(static_cast<Eigen::Index>(i));
    Labels ytr;
    for (auto i : tr) ytr.push_back(y[static_cast<std::size_t>(i)]);
    const std::size_t classes = *std::max_element(y.begin(), y.end()) + 1;
    return fit_predict(l, x(tr, Eigen::all), ytr, x(te, Eigen::all), classes, derive_seed(seed, f));
}

struct ClassifyScore {
    double acc = 0.0;
    double f1 = 0.0;
};

/// Mean test ACC and macro-F1 over stratified folds.
inline ClassifyScore kfold_classify(const Rows& data, const Labels& y, Learner l, std::size_t k, std::uint64_t seed) {
    if (data.size() != y.size()) throw ShapeError("row count and label count differ");
    const auto folds = stratified_folds(y, k, seed);
    ClassifyScore s;
    for (std::size_t f = 0; f < k; ++f) {
        auto pred = fold_predictions(l, data, y, folds, f, seed);
        Labels truth;
        for (std::size_t i = 0; i < y.size(); ++i)
            if (folds[i] == f) truth.push_back(y[i]);
        s.acc += accuracy(pred, truth);
        s.f1 += macro_f1(pred, truth);
    }
    s.acc /= static_cast<double>(k);
    s.f1 /= static_cast<double>(k);
    return s;
}

struct ClusterScore {
    double db = 0.0;
    double nmi = 0.0;
    double ari = 0.0;
};

/// K-means with k = number of distinct labels, scored against the labels.
inline ClusterScore cluster_eval(const Rows& data, const Labels& y, std::uint64_t seed) {
    const std::size_t k = std::set<std::size_t>(y.begin(), y.end()).size();
    auto p = kmeans(data, k, seed);
    return {davies_bouldin(data, p.assign), nmi(p.assign, y), ari(p.assign, y)};
}

// ---------------------------------------------------------------------------
// Reports

struct ReportLine {
    std::string variant;
    std::string key; ///< learner_metric (e.g. logistic_acc) or clustering metric (db, nmi, ari)
    double value = 0.0;
    std::uint64_t seed = 0;
};

inline void write_report_lines(std::ostream& out, const std::vector<ReportLine>& lines) {
    out << "model_variant,learner_or_metric,value,seed\n";
    for (const auto& l : lines) out << l.variant << ',' << l.key << ',' << format_double(l.value) << ',' << l.seed << '\n';
}

inline std::vector<ReportLine> parse_report_lines(std::istream& in) {
    std::vector<ReportLine> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty() || line.rfind("model_variant,", 0) == 0) continue;
        auto f = split(trim(line), ',');
        double v = 0;
        long long s = 0;
        if (f.size() != 4 || !parse_double(f[2], v) || !parse_int(f[3], s)) throw ParseError(lineno, "bad report line");
        out.push_back({f[0], f[1], v, static_cast<std::uint64_t>(s)});
    }
    return out;
}

} // namespace doufu::eval
