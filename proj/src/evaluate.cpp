#include "dlr/evaluate.hpp"

#include "dlr/reward.hpp"

namespace dlr {

EvalRecord evaluate_task(const DlrModel& model, const TaskInstance& task, const GenerateCaps& caps) {
  ad::NoGradGuard no_grad;
  const auto& vocab = model.vocab();
  EvalRecord r;
  r.task_id = task.id;
  r.family = task.family;
  GenerateOptions opt;
  opt.caps = caps;
  std::mt19937_64 unused(0);
  const auto V = model.vlm().encode_image(task.image);
  r.generation = generate(model.vlm(), model.grounder(), vocab, V, prompt_tokens(task.question, vocab), opt, unused);
  const auto traj = parse_generation(r.generation, vocab, caps.max_steps);
  r.valid = traj.has_value();
  r.correct = r.valid && exact_match(traj->answer_text(), task.answer) == 1;
  r.kl = trajectory_kl(task.oracle_masks, step_attention(r.generation));
  return r;
}

EvalReport evaluate(const DlrModel& model, const std::vector<TaskInstance>& tasks, const GenerateCaps& caps) {
  EvalReport rep;
  double kl_sum = 0.0;
  int correct = 0;
  int valid = 0;
  std::map<std::string, int> fam_correct;
  for (const auto& t : tasks) {
    const auto r = evaluate_task(model, t, caps);
    const std::string fam(to_string(t.family));
    ++rep.family_count[fam];
    if (r.correct) {
      ++correct;
      ++fam_correct[fam];
    }
    if (r.valid) ++valid;
    if (r.kl) {
      kl_sum += *r.kl;
      ++rep.kl_count;
    }
  }
  rep.count = static_cast<int>(tasks.size());
  if (rep.count > 0) {
    rep.accuracy = static_cast<double>(correct) / rep.count;
    rep.format_valid = static_cast<double>(valid) / rep.count;
  }
  if (rep.kl_count > 0) rep.mean_kl = kl_sum / rep.kl_count;
  for (const auto& [fam, n] : rep.family_count) rep.family_accuracy[fam] = static_cast<double>(fam_correct[fam]) / n;
  return rep;
}

Json EvalReport::to_json() const {
  Json fam = Json::object();
  for (const auto& [k, v] : family_accuracy) fam[k] = {{"accuracy", v}, {"count", family_count.at(k)}};
  return Json{{"count", count},
              {"accuracy", accuracy},
              {"format_valid", format_valid},
              {"mean_kl", mean_kl},
              {"kl_count", kl_count},
              {"families", fam}};
}

}  // namespace dlr
