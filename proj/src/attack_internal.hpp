#ifndef ADVTRANSFER_SRC_ATTACK_INTERNAL_HPP_
#define ADVTRANSFER_SRC_ATTACK_INTERNAL_HPP_

#include <torch/torch.h>

#include "advtransfer/attacks.hpp"

namespace advtransfer::detail {

// Clip into the eps-ball around x, then into [0, 1].
torch::Tensor project_ball(const torch::Tensor& z, const torch::Tensor& x, double eps);
torch::Tensor linf_distance(const torch::Tensor& a, const torch::Tensor& b);
// Rows whose loss and gradient are all finite.
torch::Tensor finite_rows(const torch::Tensor& loss, const torch::Tensor& grad);

AttackResult finish(const ImageBatch& batch, torch::Tensor adversarial, torch::Tensor predictions,
                    torch::Tensor iterations, torch::Tensor aborted);

}  // namespace advtransfer::detail

#endif  // ADVTRANSFER_SRC_ATTACK_INTERNAL_HPP_
