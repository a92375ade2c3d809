#pragma once
// Greedy evaluation: accuracy, format validity and attention KL.

#include <map>
#include <string>
#include <vector>

#include "dlr/generate.hpp"
#include "dlr/metrics.hpp"
#include "dlr/model.hpp"
#include "dlr/synthtask.hpp"

namespace dlr {

struct EvalRecord {
  std::string task_id;
  Family family = Family::attribute;
  bool valid = false;
  bool correct = false;
  std::optional<double> kl;
  Generation generation;
};

struct EvalReport {
  int count = 0;
  double accuracy = 0.0;
  double format_valid = 0.0;
  double mean_kl = 0.0;  // over tasks with at least one aligned step
  int kl_count = 0;
  std::map<std::string, double> family_accuracy;
  std::map<std::string, int> family_count;
  Json to_json() const;
};

EvalRecord evaluate_task(const DlrModel& model, const TaskInstance& task, const GenerateCaps& caps);
EvalReport evaluate(const DlrModel& model, const std::vector<TaskInstance>& tasks, const GenerateCaps& caps);

}  // namespace dlr
