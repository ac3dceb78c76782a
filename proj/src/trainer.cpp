#include "nowcast/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <tuple>
#include <unordered_map>

#include "nowcast/error.hpp"
#include "nowcast/verification.hpp"

namespace nowcast {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
constexpr std::size_t kInferRecords = 64;

std::uint64_t mix(std::uint64_t x) {
  x += kGolden;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

struct Batch {
  std::vector<std::size_t> records;  // unique set records, first-use order
  std::array<std::vector<std::size_t>, kHistorySteps> steps;
  std::vector<int> labels;
};

Batch make_batch(const SampleSet& set, std::span<const Instance> instances, std::span<const std::size_t> members) {
  Batch b;
  std::unordered_map<std::size_t, std::size_t> row_of;
  for (std::size_t m : members) {
    const Instance& inst = instances[m];
    for (std::size_t s = 0; s < kHistorySteps; ++s) {
      auto [it, fresh] = row_of.try_emplace(inst.steps[s], b.records.size());
      if (fresh) b.records.push_back(inst.steps[s]);
      b.steps[s].push_back(it->second);
    }
    b.labels.push_back(set.samples[inst.target].meta.label);
  }
  return b;
}

std::optional<double> validation_csi(const NowcastModel& model, const SampleSet& val, std::span<const Instance> inst,
                                     double threshold) {
  const auto probs = predict_instances(model, val, inst);
  std::vector<int> labels;
  labels.reserve(inst.size());
  for (const auto& i : inst) labels.push_back(val.samples[i.target].meta.label);
  return skill_scores(confusion(probs, labels, threshold)).csi;
}

}  // namespace

std::vector<std::vector<std::size_t>> track_chunks(const SampleSet& set, std::span<const Instance> instances,
                                                   std::size_t track_chunk) {
  if (track_chunk == 0) throw ConfigError("track chunk must be positive");
  using TrackKey = std::tuple<std::uint32_t, std::uint32_t, std::uint32_t, int, int>;
  std::map<TrackKey, std::vector<std::size_t>> tracks;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& m = set.samples[instances[i].target].meta;
    tracks[{m.event_index, m.row, m.col, m.shift_y, m.shift_x}].push_back(i);
  }
  std::vector<std::vector<std::size_t>> chunks;
  for (auto& [key, members] : tracks) {
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      return set.samples[instances[a].target].meta.frame < set.samples[instances[b].target].meta.frame;
    });
    std::vector<std::size_t> current;
    std::uint32_t last = 0;
    for (std::size_t m : members) {
      const std::uint32_t f = set.samples[instances[m].target].meta.frame;
      if (!current.empty() && (f != last + 1 || current.size() == track_chunk)) {
        chunks.push_back(std::move(current));
        current.clear();
      }
      current.push_back(m);
      last = f;
    }
    if (!current.empty()) chunks.push_back(std::move(current));
  }
  return chunks;
}

TrainResult train(const SampleSet& train_set, const SampleSet& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  const auto train_inst = index_instances(train_set);
  const auto val_inst = index_instances(val_set);
  if (train_inst.empty()) throw DataError("training split holds no target samples");
  if (val_inst.empty()) throw DataError("validation split holds no target samples");
  if (train_set.normalizer.names != val_set.normalizer.names) {
    throw ConfigError("training and validation splits use different variable lists");
  }

  NowcastModel model(cfg.model, mix(cfg.seed));
  model.normalizer = train_set.normalizer;
  model.train_config = cfg;
  model.provenance = train_set.provenance;
  auto params = model.parameters();
  Optimizer opt(cfg.optimizer, cfg.learning_rate);

  auto chunks = track_chunks(train_set, train_inst, cfg.track_chunk);
  std::mt19937_64 rng(mix(cfg.seed ^ kGolden));

  TrainResult result;
  double best = -2.0;
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(chunks.begin(), chunks.end(), rng);

    double loss_sum = 0;
    std::size_t seen = 0, batch_no = 0;
    std::vector<std::size_t> members;
    auto run_batch = [&]() {
      const Batch b = make_batch(train_set, train_inst, members);
      const Tensor blocks = make_block_tensor(train_set, b.records);
      const Tensor logits = model.forward_logits(blocks, b.steps, Mode::train);
      Tensor loss = cross_entropy_loss(logits, b.labels);
      const double l = loss.item();
      if (!std::isfinite(l)) throw DivergenceError(static_cast<int>(epoch), static_cast<int>(batch_no));
      backward(loss);
      opt.step(params);
      loss_sum += l * static_cast<double>(members.size());
      seen += members.size();
      ++batch_no;
      members.clear();
    };
    for (const auto& chunk : chunks) {
      if (!members.empty() && members.size() + chunk.size() > cfg.batch_size) run_batch();
      members.insert(members.end(), chunk.begin(), chunk.end());
    }
    if (!members.empty()) run_batch();

    EpochLog entry{epoch, loss_sum / static_cast<double>(seen), validation_csi(model, val_set, val_inst, cfg.threshold)};
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);

    const double score = entry.val_csi.value_or(-1.0);
    if (score > best) {
      best = score;
      since_best = 0;
      result.model = model.clone();
      result.best_epoch = epoch;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return result;
}

std::vector<double> predict_instances(const NowcastModel& model, const SampleSet& set,
                                      std::span<const Instance> instances) {
  if (instances.empty()) return {};
  NoGradGuard no_grad;

  std::vector<std::size_t> records;
  std::unordered_map<std::size_t, std::size_t> row_of;
  for (const auto& inst : instances) {
    for (std::size_t r : inst.steps) {
      if (row_of.try_emplace(r, records.size()).second) records.push_back(r);
    }
  }

  const std::size_t dim = model.config().feature_dim;
  std::vector<double> features(records.size() * dim);
  for (std::size_t begin = 0; begin < records.size(); begin += kInferRecords) {
    const std::size_t end = std::min(records.size(), begin + kInferRecords);
    const auto chunk = std::span<const std::size_t>(records).subspan(begin, end - begin);
    const Tensor f = model.cnn_forward(make_block_tensor(set, chunk), Mode::infer);
    std::copy(f.values().begin(), f.values().end(), features.begin() + static_cast<std::ptrdiff_t>(begin * dim));
  }
  const Tensor all = Tensor::from({records.size(), dim}, std::move(features));

  std::array<std::vector<std::size_t>, kHistorySteps> steps;
  for (const auto& inst : instances) {
    for (std::size_t s = 0; s < kHistorySteps; ++s) steps[s].push_back(row_of[inst.steps[s]]);
  }
  const Tensor probs =
      softmax(model.classify(model.lstm_forward(gather_rows(all, steps[0]), gather_rows(all, steps[1]),
                                                gather_rows(all, steps[2]))));
  std::vector<double> out(instances.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = probs.values()[2 * i + 1];
  return out;
}

std::vector<double> predict_batch(const NowcastModel& model, const SampleSet& set) {
  if (set.normalizer.names != model.normalizer.names) {
    throw ConfigError("sample set variables do not match the model's normalizer");
  }
  const auto instances = index_instances(set);
  return predict_instances(model, set, instances);
}

}  // namespace nowcast
