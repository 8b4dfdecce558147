#pragma once

#include "normgame/network.hpp"

#include <cstdint>
#include <string>

namespace normgame {

enum class PredictorKind { Oracle, OLS, CrossFit };

PredictorKind parse_predictor(const std::string& name);
std::string to_string(PredictorKind k);

struct PredictorSpec {
  PredictorKind kind = PredictorKind::CrossFit;
  int folds = 5;
  bool include_group_effects = false;
  Eigen::VectorXd oracle_gamma;

  void validate() const;
};

/// yhat = m(X). With group effects the fitted group intercepts are part of
/// the prediction. CrossFit folds are a seeded shuffle within each group,
/// dealt round-robin so every group is spread over all folds.
Eigen::VectorXd predict(const Panel& panel, const PredictorSpec& spec, std::uint64_t seed);

/// Fold label per node (exposed for tests).
std::vector<int> crossfit_folds(const Panel& panel, int folds, std::uint64_t seed);

}  // namespace normgame
