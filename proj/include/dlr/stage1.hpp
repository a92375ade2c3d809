#pragma once
// Contrastive pretraining of the grounder against frozen answer embeddings.

#include <string>
#include <vector>

#include "dlr/metrics.hpp"
#include "dlr/model.hpp"
#include "dlr/synthtask.hpp"

namespace dlr {

struct PretrainConfig {
  double tau = 0.07;
  int batch = 64;
  int epochs = 30;
  double lr = 2e-3;
  double warmup = 0.1;
  void validate() const;
};

// l2_normalize(mean of the rows).
ad::Tensor pool_latents(const ad::Tensor& mu);

// Symmetric in-batch InfoNCE; row i of z_hat is paired with row i of h_hat.
ad::Tensor infonce(const ad::Tensor& z_hat, const ad::Tensor& h_hat, double tau);

// Fraction of rows whose most similar column carries the same answer.
double retrieval_top1(const ad::Tensor& similarity, const std::vector<std::string>& answers);

struct ContrastiveItem {
  ad::Tensor features;   // m×d, constant
  ad::Tensor question;   // d, constant
  std::vector<double> answer_unit;
  std::string answer;
};

std::vector<ContrastiveItem> prepare_contrastive(const DlrModel& model, const std::vector<TaskInstance>& tasks);

struct Stage1Result {
  long steps = 0;
  double final_loss = 0.0;
  double final_top1 = 0.0;  // over the whole set in fixed batches
};

// Only grounder parameters move.
Stage1Result train_stage1(DlrModel& model, const std::vector<TaskInstance>& tasks, const PretrainConfig& config,
                          std::uint64_t seed, const MetricsFn& metrics);

}  // namespace dlr
