#include "chemmap/split.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace chemmap {

Eigen::MatrixXd ScoreSet::covariance() const {
    require(scores.rows() >= 2, "covariance needs at least two samples");
    const Eigen::RowVectorXd mu = scores.colwise().mean();
    const Eigen::MatrixXd centered = scores.rowwise() - mu;
    return centered.transpose() * centered / static_cast<double>(scores.rows() - 1);
}

ScoreSet pca_reduce(const Eigen::MatrixXd& spectra, double var_threshold) {
    const Eigen::Index n = spectra.rows();
    if (n < 2) throw Error("pca_reduce: need at least two samples");
    if (!spectra.allFinite()) throw NumericError("pca_reduce: non-finite input");

    ScoreSet out;
    out.mean = spectra.colwise().mean().transpose();
    const Eigen::MatrixXd centered = spectra.rowwise() - out.mean.transpose();

    Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd sv = svd.singularValues();
    const Eigen::VectorXd var = sv.array().square();
    const double total = var.sum();
    const double scale = centered.cwiseAbs().maxCoeff();
    if (!(total > 0.0) || sv(0) <= 1e-12 * scale * std::sqrt(static_cast<double>(centered.size())))
        throw NumericError("pca_reduce: data has zero variance");

    const Eigen::VectorXd ratio = var / total;
    Eigen::Index d = 1;
    double cumulative = ratio(0);
    while (d < ratio.size() && cumulative < var_threshold - 1e-12) {
        cumulative += ratio(d);
        ++d;
    }

    out.basis = svd.matrixV().leftCols(d);
    // Deterministic sign: largest-magnitude loading of each component positive.
    for (Eigen::Index j = 0; j < d; ++j) {
        Eigen::Index arg = 0;
        out.basis.col(j).cwiseAbs().maxCoeff(&arg);
        if (out.basis(arg, j) < 0.0) out.basis.col(j) *= -1.0;
    }
    out.explained_variance_ratio = ratio.head(d);
    out.scores = centered * out.basis;
    return out;
}

Mahalanobis::Mahalanobis(const Eigen::MatrixXd& covariance) {
    if (covariance.rows() != covariance.cols() || covariance.rows() == 0)
        throw ShapeError("mahalanobis: covariance must be square and non-empty");
    llt_.compute(covariance);
    if (llt_.info() != Eigen::Success) throw NumericError("mahalanobis: covariance is singular");
    const Eigen::VectorXd diag = llt_.matrixL().toDenseMatrix().diagonal();
    const double tol = 1e-12 * std::sqrt(covariance.diagonal().cwiseAbs().maxCoeff());
    if ((diag.array() <= tol).any()) throw NumericError("mahalanobis: covariance is singular");
}

double Mahalanobis::operator()(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const {
    if (a.size() != b.size() || a.size() != llt_.rows())
        throw ShapeError("mahalanobis: vector length does not match covariance");
    const Eigen::VectorXd diff = a - b;
    const Eigen::VectorXd z = llt_.matrixL().solve(diff);
    return std::sqrt(z.squaredNorm());
}

double mahalanobis(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::MatrixXd& covariance) {
    return Mahalanobis(covariance)(a, b);
}

std::vector<int> duplex_split(const ScoreSet& set, int k, const std::optional<std::vector<int>>& sizes) {
    const int n = set.n();
    if (k < 1) throw Error("duplex_split: k must be at least 1");
    if (n < 2 * k) throw Error("duplex_split: need at least 2k samples");

    std::vector<int> target(k, n / k);
    for (int s = 0; s < n % k; ++s) ++target[s];
    if (sizes) {
        if (static_cast<int>(sizes->size()) != k) throw Error("duplex_split: sizes must have k entries");
        if (std::accumulate(sizes->begin(), sizes->end(), 0) != n)
            throw Error("duplex_split: requested sizes do not sum to the sample count");
        for (int s : *sizes)
            if (s < 2) throw Error("duplex_split: every subset needs at least two samples");
        target = *sizes;
    }

    const Mahalanobis metric(set.covariance());
    Eigen::MatrixXd dist = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double d = metric(set.scores.row(i).transpose(), set.scores.row(j).transpose());
            dist(i, j) = d;
            dist(j, i) = d;
        }

    std::vector<int> assignment(n, -1);
    std::vector<std::vector<int>> members(k);

    // Seed each subset with the farthest remaining pair; strict '>' keeps the
    // lexicographically smallest (i, j) among ties.
    for (int s = 0; s < k; ++s) {
        int best_i = -1, best_j = -1;
        double best = -1.0;
        for (int i = 0; i < n; ++i) {
            if (assignment[i] >= 0) continue;
            for (int j = i + 1; j < n; ++j) {
                if (assignment[j] >= 0) continue;
                if (dist(i, j) > best) {
                    best = dist(i, j);
                    best_i = i;
                    best_j = j;
                }
            }
        }
        assignment[best_i] = s;
        assignment[best_j] = s;
        members[s] = {best_i, best_j};
    }

    int remaining = n - 2 * k;
    while (remaining > 0) {
        for (int s = 0; s < k && remaining > 0; ++s) {
            if (static_cast<int>(members[s].size()) >= target[s]) continue;
            int pick = -1;
            double best = -1.0;
            for (int i = 0; i < n; ++i) {
                if (assignment[i] >= 0) continue;
                double nearest = std::numeric_limits<double>::infinity();
                for (int m : members[s]) nearest = std::min(nearest, dist(i, m));
                if (nearest > best) {
                    best = nearest;
                    pick = i;
                }
            }
            assignment[pick] = s;
            members[s].push_back(pick);
            --remaining;
        }
    }
    return assignment;
}

}  // namespace chemmap
