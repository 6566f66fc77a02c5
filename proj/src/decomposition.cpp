#include "headaudit/decomposition.hpp"

#include <algorithm>
#include <cmath>
#include <charconv>
#include <cstring>
#include <sstream>

#include "headaudit/error.hpp"

namespace headaudit {

namespace {

void check_plan_shape(const HeadContributionStore& store,
                      const AblationPlan& plan) {
  if (plan.n_layers != store.n_layers() || plan.n_heads != store.n_heads() ||
      plan.embed_dim != store.embed_dim() ||
      plan.means.rows != plan.heads.size() ||
      (plan.means.rows > 0 && plan.means.cols != store.embed_dim())) {
    throw Error(Errc::kDimensionMismatch,
                "ablation plan was built from a store of a different shape");
  }
}

void check_classifier(const HeadContributionStore& store,
                      const ClassifierMatrix& classifier) {
  check_compatible(store, classifier);
}

// Adds the head terms of layers [first_layer, L) to `rep`.
void add_heads(const HeadContributionStore& store, std::size_t image,
               std::size_t first_layer, std::size_t last_layer,
               const std::vector<int>& slots, const AblationPlan* plan,
               double* rep) {
  const std::size_t d = store.embed_dim();
  const std::size_t H = store.n_heads();
  for (std::size_t l = first_layer; l < last_layer; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      const int s = slots.empty() ? -1 : slots[l * H + h];
      if (s >= 0) {
        const auto mean = plan->means.row(static_cast<std::size_t>(s));
        for (std::size_t k = 0; k < d; ++k) rep[k] += mean[k];
      } else {
        const auto c = store.head(image, l, h);
        for (std::size_t k = 0; k < d; ++k) rep[k] += static_cast<double>(c[k]);
      }
    }
  }
}

// initial + all MLP terms, the state before any head is added.
void start_sum(const HeadContributionStore& store, std::size_t image,
               double* rep) {
  const std::size_t d = store.embed_dim();
  const auto init = store.initial(image);
  for (std::size_t k = 0; k < d; ++k) rep[k] = static_cast<double>(init[k]);
  for (std::size_t l = 0; l < store.n_layers(); ++l) {
    const auto m = store.mlp(image, l);
    for (std::size_t k = 0; k < d; ++k) rep[k] += static_cast<double>(m[k]);
  }
}

void score(const ClassifierMatrix& classifier, const double* rep,
           std::size_t image, Predictions& out) {
  const std::size_t K = classifier.weights.rows;
  const std::size_t d = classifier.weights.cols;
  std::uint32_t best = 0;
  double best_logit = 0.0;
  for (std::size_t c = 0; c < K; ++c) {
    const auto w = classifier.weights.row(c);
    double logit = 0.0;
    for (std::size_t k = 0; k < d; ++k) logit += rep[k] * static_cast<double>(w[k]);
    out.logits(image, c) = logit;
    if (c == 0 || logit > best_logit) {
      best = static_cast<std::uint32_t>(c);
      best_logit = logit;
    }
  }
  out.labels[image] = best;
}

Predictions empty_predictions(std::size_t n, std::size_t K) {
  Predictions p;
  p.labels.assign(n, 0);
  p.logits = RowMatrix<double>(n, K);
  return p;
}

Predictions classify_impl(const HeadContributionStore& store,
                          const ClassifierMatrix& classifier,
                          const AblationPlan* plan, unsigned workers) {
  check_classifier(store, classifier);
  std::vector<int> slots;
  if (plan) {
    check_plan_shape(store, *plan);
    slots = plan->slot_index();
  }
  const std::size_t n = store.n_images();
  Predictions out = empty_predictions(n, classifier.weights.rows);
  parallel_for(n, workers, [&](std::size_t begin, std::size_t end) {
    std::vector<double> rep(store.embed_dim());
    for (std::size_t i = begin; i < end; ++i) {
      start_sum(store, i, rep.data());
      add_heads(store, i, 0, store.n_layers(), slots, plan, rep.data());
      score(classifier, rep.data(), i, out);
    }
  });
  return out;
}

}  // namespace

std::string to_string(HeadId id) {
  return "L" + std::to_string(id.layer) + "H" + std::to_string(id.head);
}

HeadId parse_head_id(const std::string& text) {
  auto fail = [&]() -> HeadId {
    throw Error(Errc::kInvalidArgument,
                "cannot parse head id '" + text + "' (expected L<l>H<h> or l:h)");
  };
  std::string s = text;
  std::size_t sep = std::string::npos;
  if (!s.empty() && (s[0] == 'L' || s[0] == 'l')) {
    s = s.substr(1);
    sep = s.find_first_of("Hh");
  } else {
    sep = s.find_first_of(":,");
  }
  if (sep == std::string::npos || sep == 0 || sep + 1 >= s.size()) return fail();
  HeadId id;
  const char* a = s.data();
  auto r1 = std::from_chars(a, a + sep, id.layer);
  auto r2 = std::from_chars(a + sep + 1, a + s.size(), id.head);
  if (r1.ec != std::errc{} || r1.ptr != a + sep || r2.ec != std::errc{} ||
      r2.ptr != a + s.size()) {
    return fail();
  }
  return id;
}

std::vector<HeadId> parse_head_list(const std::string& text) {
  std::vector<HeadId> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ' ')) {
    std::stringstream inner(item);
    std::string tok;
    // Items may be separated by spaces or ';'.
    while (std::getline(inner, tok, ';')) {
      if (!tok.empty()) out.push_back(parse_head_id(tok));
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::string join_heads(const std::vector<HeadId>& heads) {
  std::string out;
  for (const auto& h : heads) {
    if (!out.empty()) out += ' ';
    out += to_string(h);
  }
  return out;
}

void check_head(const HeadContributionStore& store, HeadId id) {
  if (id.layer >= store.n_layers() || id.head >= store.n_heads()) {
    throw Error(Errc::kInvalidArgument,
                "head " + to_string(id) + " out of range for store with L=" +
                    std::to_string(store.n_layers()) +
                    ", H=" + std::to_string(store.n_heads()));
  }
}

std::vector<int> AblationPlan::slot_index() const {
  std::vector<int> slots(n_layers * n_heads, -1);
  for (std::size_t i = 0; i < heads.size(); ++i) {
    slots[heads[i].layer * n_heads + heads[i].head] = static_cast<int>(i);
  }
  return slots;
}

AblationPlan head_means(const HeadContributionStore& store,
                        std::vector<HeadId> heads) {
  if (store.n_images() == 0) {
    throw Error(Errc::kInvalidArgument, "cannot compute head means of an empty store");
  }
  std::sort(heads.begin(), heads.end());
  heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
  for (const auto& h : heads) check_head(store, h);
  AblationPlan plan;
  plan.n_images = store.n_images();
  plan.n_layers = store.n_layers();
  plan.n_heads = store.n_heads();
  plan.embed_dim = store.embed_dim();
  const std::size_t d = store.embed_dim();
  plan.means = RowMatrix<double>(heads.size(), d);
  for (std::size_t r = 0; r < heads.size(); ++r) {
    auto row = plan.means.row(r);
    for (std::size_t i = 0; i < store.n_images(); ++i) {
      const auto c = store.head(i, heads[r].layer, heads[r].head);
      for (std::size_t k = 0; k < d; ++k) row[k] += static_cast<double>(c[k]);
    }
    const double n = static_cast<double>(store.n_images());
    for (auto& v : row) v /= n;
  }
  plan.heads = std::move(heads);
  return plan;
}

bool plan_matches(const HeadContributionStore& store, const AblationPlan& plan) {
  if (plan.n_images != store.n_images()) return false;
  try {
    check_plan_shape(store, plan);
    const AblationPlan fresh = head_means(store, plan.heads);
    return fresh.heads == plan.heads && fresh.means == plan.means;
  } catch (const Error&) {
    return false;
  }
}

std::vector<double> reconstruct(const HeadContributionStore& store,
                                std::size_t image) {
  if (image >= store.n_images()) {
    throw Error(Errc::kInvalidArgument, "image index out of range");
  }
  std::vector<double> rep(store.embed_dim());
  start_sum(store, image, rep.data());
  add_heads(store, image, 0, store.n_layers(), {}, nullptr, rep.data());
  return rep;
}

std::vector<double> reconstruct(const HeadContributionStore& store,
                                std::size_t image, const AblationPlan& plan) {
  if (image >= store.n_images()) {
    throw Error(Errc::kInvalidArgument, "image index out of range");
  }
  check_plan_shape(store, plan);
  std::vector<double> rep(store.embed_dim());
  start_sum(store, image, rep.data());
  add_heads(store, image, 0, store.n_layers(), plan.slot_index(), &plan,
            rep.data());
  return rep;
}

AdditivityCheck check_additivity(const HeadContributionStore& store,
                                 unsigned workers) {
  if (!store.has_reference()) {
    throw Error(Errc::kInvalidArgument, "store has no reference representations");
  }
  std::vector<double> errors(store.n_images(), 0.0);
  parallel_for(store.n_images(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto rep = reconstruct(store, i);
      const auto ref = store.reference(i);
      double diff = 0.0, norm = 0.0;
      for (std::size_t k = 0; k < rep.size(); ++k) {
        const double r = static_cast<double>(ref[k]);
        diff += (rep[k] - r) * (rep[k] - r);
        norm += r * r;
      }
      errors[i] = norm > 0.0 ? std::sqrt(diff / norm) : std::sqrt(diff);
    }
  });
  AdditivityCheck out;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (errors[i] > out.max_relative_error) {
      out.max_relative_error = errors[i];
      out.worst_image = i;
    }
  }
  return out;
}

std::size_t Predictions::n_correct(const HeadContributionStore& store) const {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == store.true_class(i)) ++correct;
  }
  return correct;
}

double Predictions::accuracy(const HeadContributionStore& store) const {
  if (labels.empty()) return 0.0;
  return static_cast<double>(n_correct(store)) /
         static_cast<double>(labels.size());
}

Predictions classify(const HeadContributionStore& store,
                     const ClassifierMatrix& classifier, unsigned workers) {
  return classify_impl(store, classifier, nullptr, workers);
}

Predictions classify(const HeadContributionStore& store,
                     const ClassifierMatrix& classifier,
                     const AblationPlan& plan, unsigned workers) {
  return classify_impl(store, classifier, &plan, workers);
}

AblationEngine::AblationEngine(const HeadContributionStore& store,
                               const ClassifierMatrix& classifier,
                               unsigned workers,
                               std::size_t checkpoint_budget_bytes)
    : store_(store), classifier_(classifier), workers_(std::max(1u, workers)) {
  check_classifier(store, classifier);
  const std::size_t n = store.n_images();
  const std::size_t d = store.embed_dim();
  const std::size_t L = store.n_layers();
  const std::size_t per_checkpoint = std::max<std::size_t>(1, n * d * sizeof(double));
  const std::size_t affordable =
      std::clamp<std::size_t>(checkpoint_budget_bytes / per_checkpoint, 1, L);
  // Evenly spaced layer boundaries, always including 0.
  for (std::size_t c = 0; c < affordable; ++c) {
    const std::size_t layer = c * L / affordable;
    if (checkpoint_layers_.empty() || checkpoint_layers_.back() != layer) {
      checkpoint_layers_.push_back(layer);
    }
  }
  const std::size_t C = checkpoint_layers_.size();
  checkpoints_.assign(n * C * d, 0.0);
  baseline_ = empty_predictions(n, classifier.weights.rows);
  parallel_for(n, workers_, [&](std::size_t begin, std::size_t end) {
    std::vector<double> rep(d);
    for (std::size_t i = begin; i < end; ++i) {
      start_sum(store_, i, rep.data());
      std::size_t layer = 0;
      for (std::size_t c = 0; c < C; ++c) {
        add_heads(store_, i, layer, checkpoint_layers_[c], {}, nullptr, rep.data());
        layer = checkpoint_layers_[c];
        std::memcpy(&checkpoints_[(i * C + c) * d], rep.data(), d * sizeof(double));
      }
      add_heads(store_, i, layer, L, {}, nullptr, rep.data());
      score(classifier_, rep.data(), i, baseline_);
    }
  });
}

Predictions AblationEngine::evaluate(const AblationPlan& plan) const {
  check_plan_shape(store_, plan);
  if (plan.empty()) return baseline_;
  const std::vector<int> slots = plan.slot_index();
  const std::size_t first_layer = plan.heads.front().layer;
  const std::size_t C = checkpoint_layers_.size();
  std::size_t c = 0;
  while (c + 1 < C && checkpoint_layers_[c + 1] <= first_layer) ++c;
  const std::size_t start_layer = checkpoint_layers_[c];
  const std::size_t n = store_.n_images();
  const std::size_t d = store_.embed_dim();
  Predictions out = empty_predictions(n, classifier_.weights.rows);
  parallel_for(n, workers_, [&](std::size_t begin, std::size_t end) {
    std::vector<double> rep(d);
    for (std::size_t i = begin; i < end; ++i) {
      std::memcpy(rep.data(), &checkpoints_[(i * C + c) * d], d * sizeof(double));
      add_heads(store_, i, start_layer, store_.n_layers(), slots, &plan, rep.data());
      score(classifier_, rep.data(), i, out);
    }
  });
  return out;
}

Predictions AblationEngine::ablate(const std::vector<HeadId>& heads) const {
  return evaluate(head_means(store_, heads));
}

}  // namespace headaudit
