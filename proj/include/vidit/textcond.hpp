#pragma once

#include <optional>
#include <span>

#include "vidit/model.hpp"
#include "vidit/worldgen.hpp"

namespace vidit::textcond {

// Adds one learned vector per action class, injected at the slot after bos.
model::ModelConfig with_conditioning(model::ModelConfig cfg, int n_classes = world::kNumClasses);

// The slot input for a label, or the zero vector when absent.
model::Condition condition_prefix(std::optional<world::Action> label);

// Throws InvalidArgument for models built without the slot.
void require_slot(const model::TransformerModel& model);

std::span<const float> embedding_of(const model::TransformerModel& model, world::Action label);

// Positions contributing to the loss: bos and the slot never do.
inline int loss_token_count(int n_ids) { return n_ids - 1; }

// Largest absolute logit difference between two labels on the same ids.
double label_logit_gap(const model::TransformerModel& model, std::span<const int> ids, world::Action a,
                       world::Action b);

}  // namespace vidit::textcond
