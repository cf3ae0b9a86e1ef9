#pragma once

// White-box and transfer attacks in raw [0, 1] pixel space.
//
// Every attack works on a batch [B x H x W x C]. The loss is the summed
// (not averaged) cross-entropy, so each image's gradient is exactly the one
// it would get when attacked alone. All attacks are untargeted.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssmr/data_io.hpp"
#include "ssmr/model.hpp"
#include "ssmr/tensor.hpp"

namespace ssmr {

// What an attack needs from a classifier. Logits must be differentiable with
// respect to the images when those are tape-linked.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Tensor logits(const Tensor& images) const = 0;
  // Side of the square patch used by Patch-Fool (the model's token patch).
  virtual std::int64_t patch_size() const = 0;
  // Streams carried by the forward graph; masking anything else is an error.
  virtual StreamSet stream_tags() const { return {}; }
  virtual bool has_attention() const { return false; }
  // Logits and the attention paid to each image's patches (summed).
  virtual std::pair<Tensor, Tensor> logits_with_attention(const Tensor& images,
                                                          const std::vector<std::vector<std::int64_t>>& patches) const;
};

class ModelClassifier : public Classifier {
 public:
  explicit ModelClassifier(const Model& model) : model_(model) {}
  Tensor logits(const Tensor& images) const override { return model_.forward(images); }
  std::int64_t patch_size() const override { return model_.config().patch_size; }
  StreamSet stream_tags() const override;
  bool has_attention() const override { return model_.has_attention(); }
  std::pair<Tensor, Tensor> logits_with_attention(const Tensor& images,
                                                  const std::vector<std::vector<std::int64_t>>& patches) const override {
    return model_.forward_with_attention(images, patches);
  }
  const Model& model() const { return model_; }

 private:
  const Model& model_;
};

enum class AttackKind { fgsm, pgd, patch_fool };

std::string_view to_string(AttackKind kind);
AttackKind parse_attack_kind(std::string_view name);

struct AttackConfig {
  AttackKind kind = AttackKind::pgd;
  double epsilon = 1.0 / 255.0;    // l-inf radius, pixel units
  double step_size = 0.5 / 255.0;  // PGD step; Patch-Fool initial Adam step
  int iterations = 5;
  double decay = 0.95;  // Patch-Fool step decay factor ...
  int decay_every = 10;  // ... applied every this many iterations
  double alpha = 0.002;  // attention term weight (attention models only)
  int n_patches = 1;
  std::optional<std::vector<std::int64_t>> patch_indices;  // same list for every image
  StreamSet mask;
  std::uint64_t seed = 0;
  // Patch-Fool only: stop updating an image once it is misclassified.
  bool early_stop = false;

  // Paper constants for each kind.
  static AttackConfig defaults(AttackKind kind);
  // Throws ValidationError naming the violated invariant.
  void validate() const;
  // One line per constant, for report headers.
  std::string describe() const;
};

struct AdvResult {
  Tensor x_adv;
  std::vector<bool> success;       // per image: prediction on x_adv differs from the label
  std::vector<double> loss_trace;  // summed loss at every iterate, before its update
  Tensor clean_logits;             // forward at x from the first gradient evaluation
};

// Summed cross-entropy and its gradient with respect to the images, with
// `mask` active on the tape. Fails on a non-finite gradient.
struct LossGrad {
  double loss;
  Tensor grad;
  Tensor logits;
};
LossGrad loss_and_grad(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const StreamSet& mask = {});

AdvResult fgsm(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const AttackConfig& cfg);
AdvResult pgd(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const AttackConfig& cfg);
AdvResult masked_attack(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const AttackConfig& cfg);

// `first_index` is the dataset position of x's first row; random patch
// choices are drawn per image from (cfg.seed, position), so a larger
// n_patches always extends the smaller choice.
AdvResult patch_fool(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const AttackConfig& cfg,
                     std::int64_t first_index = 0);
std::vector<std::int64_t> patch_choice(const AttackConfig& cfg, std::int64_t n_grid_patches, std::int64_t image_index);

// Dispatch on cfg.kind (pgd with a non-empty mask is masked_attack).
AdvResult run_attack(const Classifier& f, const Tensor& x, const std::vector<int>& labels, const AttackConfig& cfg,
                     std::int64_t first_index = 0);

std::vector<int> predict(const Classifier& f, const Tensor& x);
// Top-1 accuracy over the dataset in batches.
double accuracy(const Classifier& f, const Dataset& data, std::int64_t batch = 64);
// Robust accuracy: attack every batch, score predictions on x_adv.
double robust_accuracy(const Classifier& f, const Dataset& data, const AttackConfig& cfg, std::int64_t batch = 32,
                       int workers = 1);

// Adversarial examples crafted on `src` and scored on `dst`, both directions.
// Rows: clean accuracy of each model and the two transfer accuracies.
std::vector<ReportRow> transfer_eval(const Classifier& src, const std::string& src_name, const Classifier& dst,
                                     const std::string& dst_name, const Dataset& data, const AttackConfig& cfg,
                                     std::int64_t batch = 32, int workers = 1);

// Runs fn(chunk) for chunk in [0, n) on up to `workers` threads.
void parallel_chunks(std::int64_t n, int workers, const std::function<void(std::int64_t)>& fn);

}  // namespace ssmr
