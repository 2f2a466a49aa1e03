#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "chemmap/common.hpp"

namespace chemmap {

/// PCA scores of a sample set. `basis` holds one loading vector per column.
struct ScoreSet {
    Eigen::MatrixXd scores;                   // n x d
    Eigen::VectorXd explained_variance_ratio; // d
    Eigen::VectorXd mean;                     // p
    Eigen::MatrixXd basis;                    // p x d, orthonormal columns

    int n() const { return static_cast<int>(scores.rows()); }
    int d() const { return static_cast<int>(scores.cols()); }
    /// Sample covariance (n - 1 denominator) of the scores.
    Eigen::MatrixXd covariance() const;
};

/// Keeps the smallest number of components whose cumulative explained
/// variance reaches `var_threshold` (at least one).
ScoreSet pca_reduce(const Eigen::MatrixXd& spectra, double var_threshold = 0.99);

/// Mahalanobis metric with a pre-factorised covariance. Construction fails
/// on a singular (or indefinite) covariance.
class Mahalanobis {
public:
    explicit Mahalanobis(const Eigen::MatrixXd& covariance);
    double operator()(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const;

private:
    Eigen::LLT<Eigen::MatrixXd> llt_;
};

double mahalanobis(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::MatrixXd& covariance);

/// k-way DUPLEX. Returns the subset index of every sample.
///
/// Subsets are seeded in turn with the farthest remaining pair, then grown
/// round-robin, each subset taking the unassigned sample whose minimum
/// distance to the subset's members is largest. Ties resolve to the lowest
/// sample index. Default sizes are n / k with the remainder going to the
/// first subsets.
std::vector<int> duplex_split(const ScoreSet& scores, int k,
                              const std::optional<std::vector<int>>& sizes = std::nullopt);

}  // namespace chemmap
