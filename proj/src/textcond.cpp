#include "vidit/textcond.hpp"

#include <cmath>

#include "vidit/error.hpp"

namespace vidit::textcond {

model::ModelConfig with_conditioning(model::ModelConfig cfg, int n_classes) {
  if (n_classes < 1) throw InvalidArgument("conditioning needs at least one class");
  cfg.conditioning = true;
  cfg.n_classes = n_classes;
  return cfg;
}

model::Condition condition_prefix(std::optional<world::Action> label) {
  return label ? model::Condition::of(world::class_id(*label)) : model::Condition::none();
}

void require_slot(const model::TransformerModel& model) {
  if (!model.config().conditioning) throw InvalidArgument("model was built without a conditioning slot");
}

std::span<const float> embedding_of(const model::TransformerModel& model, world::Action label) {
  require_slot(model);
  const int c = world::class_id(label);
  if (c >= model.config().n_classes) throw InvalidArgument("label outside the model's classes");
  const auto& t = model.params().at("cond_embedding");
  const size_t d = static_cast<size_t>(model.config().d_model);
  return std::span(t.data).subspan(c * d, d);
}

double label_logit_gap(const model::TransformerModel& model, std::span<const int> ids, world::Action a,
                       world::Action b) {
  require_slot(model);
  const auto ta = model::forward(model, ids, {}, condition_prefix(a));
  const auto tb = model::forward(model, ids, {}, condition_prefix(b));
  double gap = 0;
  for (size_t i = 0; i < ta.logits.size(); ++i) gap = std::max(gap, double(std::abs(ta.logits[i] - tb.logits[i])));
  return gap;
}

}  // namespace vidit::textcond
