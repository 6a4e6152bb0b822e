#include <algorithm>
#include <cmath>
#include <set>

#include "compass/error.hpp"
#include "compass/model.hpp"
#include "compass/parallel.hpp"
#include "compass/rng.hpp"

namespace compass {

namespace {

struct ExampleGrad {
    double loss = 0.0;
    Weights grad;
};

}  // namespace

std::vector<Checkpoint> train(const ModelConfig& config, const std::vector<std::vector<int>>& corpus,
                              const TrainSchedule& schedule, std::uint64_t seed,
                              const std::optional<std::filesystem::path>& out_dir, std::vector<TrainLogEntry>* log) {
    config.validate();
    if (schedule.total_steps < 0) {
        throw InvalidArgument("total_steps must be >= 0");
    }
    if (schedule.batch_size < 1) {
        throw InvalidArgument("batch_size must be >= 1");
    }
    if (!(schedule.lr > 0.0)) {
        throw InvalidArgument("learning rate must be positive");
    }
    std::vector<const std::vector<int>*> docs;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& doc = corpus[i];
        if (static_cast<int>(doc.size()) > config.max_seq_len) {
            throw InvalidArgument("corpus document " + std::to_string(i) + " has " + std::to_string(doc.size()) +
                                  " tokens, more than max_seq_len " + std::to_string(config.max_seq_len));
        }
        if (doc.size() >= 2) {
            docs.push_back(&doc);
        }
    }
    if (docs.empty()) {
        throw InvalidArgument("empty corpus: no document has two or more tokens");
    }
    std::set<int> wanted;
    for (const int s : schedule.checkpoint_steps) {
        if (s < 0 || s > schedule.total_steps) {
            throw InvalidArgument("checkpoint step " + std::to_string(s) + " outside [0, " +
                                  std::to_string(schedule.total_steps) + "]");
        }
        wanted.insert(s);
    }

    Checkpoint master = init_model(config, seed);
    Weights m1 = Weights::zeros(config);
    Weights m2 = Weights::zeros(config);
    Rng batch_rng(derive_seed(seed, "batches"));
    std::vector<Checkpoint> emitted;

    const auto emit = [&](int step) {
        Checkpoint c = master;
        c.step = step;
        round_to_float(c.weights);
        if (out_dir) {
            save_checkpoint(c, *out_dir / checkpoint_filename(step));
        }
        emitted.push_back(std::move(c));
    };

    if (wanted.contains(0)) {
        emit(0);
    }
    const auto B = static_cast<std::size_t>(schedule.batch_size);
    std::vector<std::size_t> batch(B);
    for (int step = 1; step <= schedule.total_steps; ++step) {
        for (std::size_t b = 0; b < B; ++b) {
            batch[b] = static_cast<std::size_t>(batch_rng.uniform_index(docs.size()));
        }
        auto grads = parallel_map<ExampleGrad>(B, [&](std::size_t b) {
            ForwardBackward fb = forward_backward(master, *docs[batch[b]], Objective::next_token(), {},
                                                  LnGradMode::Full, true);
            return ExampleGrad{fb.loss, std::move(*fb.grads.params)};
        });

        double loss = 0.0;
        Weights total = std::move(grads[0].grad);
        loss += grads[0].loss;
        {
            const auto acc = param_views(total, config);
            for (std::size_t b = 1; b < B; ++b) {
                loss += grads[b].loss;
                const auto part = param_views(grads[b].grad, config);
                for (std::size_t t = 0; t < acc.size(); ++t) {
                    for (std::size_t i = 0; i < acc[t].size; ++i) {
                        acc[t].data[i] += part[t].data[i];
                    }
                }
            }
        }
        loss /= static_cast<double>(B);
        if (!std::isfinite(loss)) {
            throw NumericError("training loss became non-finite at step " + std::to_string(step));
        }

        const auto p = param_views(master.weights, config);
        const auto g = param_views(total, config);
        const auto a = param_views(m1, config);
        const auto v = param_views(m2, config);
        const double inv_b = 1.0 / static_cast<double>(B);
        const double bc1 = 1.0 - std::pow(schedule.beta1, step);
        const double bc2 = 1.0 - std::pow(schedule.beta2, step);
        for (std::size_t t = 0; t < p.size(); ++t) {
            for (std::size_t i = 0; i < p[t].size; ++i) {
                const double gi = g[t].data[i] * inv_b;
                if (schedule.optimizer == Optimizer::Sgd) {
                    p[t].data[i] -= schedule.lr * gi;
                } else {
                    a[t].data[i] = schedule.beta1 * a[t].data[i] + (1.0 - schedule.beta1) * gi;
                    v[t].data[i] = schedule.beta2 * v[t].data[i] + (1.0 - schedule.beta2) * gi * gi;
                    const double mhat = a[t].data[i] / bc1;
                    const double vhat = v[t].data[i] / bc2;
                    p[t].data[i] -= schedule.lr * mhat / (std::sqrt(vhat) + schedule.adam_eps);
                }
            }
        }
        if (log) {
            log->push_back({step, loss});
        }
        if (wanted.contains(step)) {
            emit(step);
        }
    }
    return emitted;
}

double corpus_loss(const Checkpoint& ckpt, const std::vector<std::vector<int>>& corpus) {
    std::vector<const std::vector<int>*> docs;
    for (const auto& doc : corpus) {
        if (doc.size() >= 2) {
            docs.push_back(&doc);
        }
    }
    if (docs.empty()) {
        throw InvalidArgument("corpus_loss: no document has two or more tokens");
    }
    const auto losses = parallel_map<double>(docs.size(), [&](std::size_t i) {
        return objective_value(forward_cached(ckpt, *docs[i]), Objective::next_token());
    });
    double total = 0.0;
    for (const double l : losses) {
        total += l;
    }
    return total / static_cast<double>(docs.size());
}

}  // namespace compass
