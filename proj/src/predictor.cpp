#include "normgame/predictor.hpp"

#include "normgame/errors.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace normgame {

PredictorKind parse_predictor(const std::string& name) {
  if (name == "oracle") return PredictorKind::Oracle;
  if (name == "ols") return PredictorKind::OLS;
  if (name == "crossfit" || name == "cross-fit" || name == "cf") return PredictorKind::CrossFit;
  throw std::invalid_argument("unknown predictor '" + name + "' (expected oracle, ols or crossfit)");
}

std::string to_string(PredictorKind k) {
  switch (k) {
    case PredictorKind::Oracle: return "oracle";
    case PredictorKind::OLS: return "ols";
    case PredictorKind::CrossFit: return "crossfit";
  }
  return "?";
}

void PredictorSpec::validate() const {
  if (kind == PredictorKind::CrossFit && folds < 2) {
    throw std::invalid_argument("CrossFit predictor needs folds >= 2, got " + std::to_string(folds));
  }
}

namespace {

// Design for the predictor regression: X, plus dummies for groups 2..G.
Eigen::MatrixXd design(const Panel& panel, bool group_effects) {
  if (!group_effects || panel.num_groups() < 2) return panel.X;
  const Index G = static_cast<Index>(panel.num_groups());
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(panel.num_nodes(), panel.num_covariates() + G - 1);
  D.leftCols(panel.num_covariates()) = panel.X;
  for (std::size_t g = 1; g < panel.num_groups(); ++g) {
    D.col(panel.num_covariates() + static_cast<Index>(g) - 1).segment(panel.offsets[g], panel.group_size(g)).setOnes();
  }
  return D;
}

Eigen::VectorXd fit(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, const std::string& split) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < A.cols()) {
    throw RankError("predictor: design is rank deficient on " + split + " (rank " + std::to_string(qr.rank()) +
                    " of " + std::to_string(A.cols()) + ")");
  }
  return qr.solve(b);
}

}  // namespace

std::vector<int> crossfit_folds(const Panel& panel, int folds, std::uint64_t seed) {
  std::vector<int> fold(static_cast<std::size_t>(panel.num_nodes()));
  std::mt19937_64 rng(seed);
  int next = 0;
  for (std::size_t g = 0; g < panel.num_groups(); ++g) {
    std::vector<Index> idx(static_cast<std::size_t>(panel.group_size(g)));
    std::iota(idx.begin(), idx.end(), panel.offsets[g]);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (Index i : idx) {
      fold[static_cast<std::size_t>(i)] = next;
      next = (next + 1) % folds;
    }
  }
  return fold;
}

Eigen::VectorXd predict(const Panel& panel, const PredictorSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.kind == PredictorKind::Oracle) {
    if (spec.oracle_gamma.size() != panel.num_covariates()) {
      throw std::invalid_argument("oracle predictor: gamma has " + std::to_string(spec.oracle_gamma.size()) +
                                  " entries for " + std::to_string(panel.num_covariates()) + " covariates");
    }
    return panel.X * spec.oracle_gamma;
  }
  if (!panel.y) throw std::invalid_argument(to_string(spec.kind) + " predictor needs an outcome column");
  const Eigen::MatrixXd A = design(panel, spec.include_group_effects);
  const Eigen::VectorXd& y = *panel.y;

  if (spec.kind == PredictorKind::OLS) return A * fit(A, y, "the full sample");

  const auto fold = crossfit_folds(panel, spec.folds, seed);
  Eigen::VectorXd yhat(panel.num_nodes());
  for (int f = 0; f < spec.folds; ++f) {
    std::vector<Index> train;
    std::vector<Index> test;
    for (Index i = 0; i < panel.num_nodes(); ++i) (fold[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
    if (test.empty()) continue;
    Eigen::MatrixXd At(static_cast<Index>(train.size()), A.cols());
    Eigen::VectorXd yt(static_cast<Index>(train.size()));
    for (std::size_t r = 0; r < train.size(); ++r) {
      At.row(static_cast<Index>(r)) = A.row(train[r]);
      yt(static_cast<Index>(r)) = y(train[r]);
    }
    const Eigen::VectorXd coef = fit(At, yt, "the complement of fold " + std::to_string(f));
    for (Index i : test) yhat(i) = A.row(i).dot(coef);
  }
  return yhat;
}

}  // namespace normgame
