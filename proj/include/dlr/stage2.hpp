#pragma once
// Supervised finetuning on gold trajectories with sequential latent capture.

#include <string>
#include <vector>

#include "dlr/evaluate.hpp"
#include "dlr/metrics.hpp"
#include "dlr/model.hpp"
#include "dlr/synthtask.hpp"

namespace dlr {

struct SftConfig {
  double lr = 1e-3;
  int epochs = 3;
  int batch = 8;
  double warmup = 0.1;
  int dev_every = 0;  // optimizer steps between dev checks; 0 = only at the end
  int dev_count = 500;
  GenerateCaps caps;
  void validate() const;
};

struct SftExample {
  std::vector<int> tokens;
  std::vector<std::uint8_t> mask;
  SequenceLayout layout;
};

SftExample make_sft_example(const TaskInstance& task, const Vocab& vocab, int max_steps = kDefaultMaxSteps);

struct TwoPassOutput {
  ad::Tensor logits;
  int passes = 0;
  std::vector<GrounderOutput> grounded;
};

// One capture pass per step up to its </premise>, then a full pass with
// every latent block filled by the grounder mean.
TwoPassOutput two_pass_forward(const DlrModel& model, const SftExample& example, const ad::Tensor& image_features);

// Next-token masked cross entropy: logits row t is scored against token t+1
// when position t+1 is supervised.
ad::Tensor sft_loss(const ad::Tensor& logits, const SftExample& example);
// {correct, counted} over supervised next-token predictions.
std::pair<int, int> teacher_forced_hits(const ad::Tensor& logits, const SftExample& example);

struct Stage2Result {
  long steps = 0;
  double dev_tf_acc = 0.0;
  EvalReport dev;
};

Stage2Result train_stage2(DlrModel& model, const std::vector<TaskInstance>& tasks,
                          const std::vector<TaskInstance>& dev_tasks, const SftConfig& config, std::uint64_t seed,
                          const MetricsFn& metrics);

// Teacher-forced accuracy over a task set.
double teacher_forced_accuracy(const DlrModel& model, const std::vector<TaskInstance>& tasks);

}  // namespace dlr
