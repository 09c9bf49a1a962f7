#pragma once

#include "faststamp/fixed_model.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace faststamp {
namespace dataflow {

using fixed::Word;

enum class StageKind { Source, Sink, Conv, Bn, Act, Upsample, Concat, Clone };

inline const char* stage_kind_name(StageKind k) {
  switch (k) {
    case StageKind::Source: return "source";
    case StageKind::Sink: return "sink";
    case StageKind::Conv: return "conv";
    case StageKind::Bn: return "bn";
    case StageKind::Act: return "act";
    case StageKind::Upsample: return "upsample";
    case StageKind::Concat: return "concat";
    case StageKind::Clone: return "clone";
  }
  return "?";
}

class DataflowError : public std::runtime_error {
 public:
  explicit DataflowError(const std::string& m) : std::runtime_error(m) {}
};

/// One FIFO element: a pixel's channel vector (the message head passes one
/// element holding its whole vector).
using Element = std::vector<Word>;

/// Bounded single-producer single-consumer channel.
struct FifoChannel {
  int id = -1;
  std::string name;
  int channels = 0;
  int capacity = 0;
  int producer = -1;
  int consumer = -1;

  std::deque<Element> q;
  long pushed = 0;
  long popped = 0;
  int high_water = 0;
  long lead = -1;  // elements produced before the consumer's first pop

  bool full() const { return static_cast<int>(q.size()) >= capacity; }
  bool empty() const { return q.empty(); }

  void reset() {
    q.clear();
    pushed = popped = 0;
    high_water = 0;
    lead = -1;
  }
};

class StageGraph;

/// A dataflow stage; each try_step performs at most one pop and/or push.
class Stage {
 public:
  Stage(StageKind kind, std::string name) : kind_(kind), name_(std::move(name)) {}
  virtual ~Stage() = default;

  StageKind kind() const { return kind_; }
  const std::string& name() const { return name_; }
  int id = -1;
  std::vector<int> in_fifos;
  std::vector<int> out_fifos;
  long consumed = 0;
  long produced = 0;

  virtual bool try_step(StageGraph& g) = 0;
  virtual bool done() const = 0;
  virtual void reset() {
    consumed = 0;
    produced = 0;
  }

 protected:
  StageKind kind_;
  std::string name_;
};

struct StageReport {
  int id;
  std::string name;
  std::string kind;
  long consumed;
  long produced;
};

struct FifoReport {
  int id;
  std::string name;
  int capacity;
  long pushed;
  long popped;
  int high_water;
  long lead;
};

struct RunReport {
  long sweeps = 0;
  std::vector<StageReport> stages;
  std::vector<FifoReport> fifos;

  nlohmann::json to_json() const {
    nlohmann::json js = nlohmann::json::array();
    for (const auto& s : stages)
      js.push_back({{"record", "stage"},
                    {"id", s.id},
                    {"name", s.name},
                    {"kind", s.kind},
                    {"consumed", s.consumed},
                    {"produced", s.produced}});
    for (const auto& f : fifos)
      js.push_back({{"record", "fifo"},
                    {"id", f.id},
                    {"name", f.name},
                    {"capacity", f.capacity},
                    {"pushed", f.pushed},
                    {"popped", f.popped},
                    {"high_water", f.high_water},
                    {"lead", f.lead}});
    return {{"sweeps", sweeps}, {"records", js}};
  }
};

/// The encoder as stages connected by bounded FIFOs.
class StageGraph {
 public:
  std::vector<std::unique_ptr<Stage>> stages;
  std::vector<FifoChannel> fifos;
  std::shared_ptr<const QuantizedEncoder> model;

  int add_fifo(const std::string& name, int channels, int capacity) {
    FifoChannel f;
    f.id = static_cast<int>(fifos.size());
    f.name = name;
    f.channels = channels;
    f.capacity = capacity;
    fifos.push_back(std::move(f));
    return fifos.back().id;
  }

  Stage& add_stage(std::unique_ptr<Stage> s) {
    s->id = static_cast<int>(stages.size());
    for (int f : s->in_fifos) {
      if (fifos[static_cast<std::size_t>(f)].consumer != -1)
        throw DataflowError("fifo " + fifos[static_cast<std::size_t>(f)].name +
                            " already has a consumer");
      fifos[static_cast<std::size_t>(f)].consumer = s->id;
    }
    for (int f : s->out_fifos) {
      if (fifos[static_cast<std::size_t>(f)].producer != -1)
        throw DataflowError("fifo " + fifos[static_cast<std::size_t>(f)].name +
                            " already has a producer");
      fifos[static_cast<std::size_t>(f)].producer = s->id;
    }
    stages.push_back(std::move(s));
    return *stages.back();
  }

  bool can_push(int fifo) const { return !fifos[static_cast<std::size_t>(fifo)].full(); }
  bool can_pop(int fifo) const { return !fifos[static_cast<std::size_t>(fifo)].empty(); }

  void push(int fifo, Element e) {
    auto& f = fifos[static_cast<std::size_t>(fifo)];
    if (f.full()) throw DataflowError("push into full fifo " + f.name);
    f.q.push_back(std::move(e));
    f.pushed += 1;
    f.high_water = std::max(f.high_water, static_cast<int>(f.q.size()));
  }

  Element pop(int fifo) {
    auto& f = fifos[static_cast<std::size_t>(fifo)];
    if (f.empty()) throw DataflowError("pop from empty fifo " + f.name);
    Element e = std::move(f.q.front());
    f.q.pop_front();
    if (f.popped == 0) f.lead = f.pushed;
    f.popped += 1;
    return e;
  }

  void reset() {
    for (auto& f : fifos) f.reset();
    for (auto& s : stages) s->reset();
  }

  /// Structural checks: every fifo wired to exactly one producer and one
  /// consumer, clone/concat arity, and acyclicity.
  void validate() const {
    for (const auto& f : fifos) {
      if (f.producer < 0 || f.consumer < 0)
        throw DataflowError("fifo " + f.name + " is not fully connected");
      if (f.capacity < 1) throw DataflowError("fifo " + f.name + " has zero capacity");
    }
    for (const auto& s : stages) {
      if (s->kind() == StageKind::Clone &&
          (s->in_fifos.size() != 1 || s->out_fifos.size() != 2))
        throw DataflowError("clone stage " + s->name() + " must be 1-in/2-out");
      if (s->kind() == StageKind::Concat && s->in_fifos.size() != 2)
        throw DataflowError("concat stage " + s->name() + " must have 2 inputs");
    }
    topological_order();
  }

  /// Kahn topological sort over stage dependencies; throws on a cycle.
  std::vector<int> topological_order() const {
    std::vector<int> indeg(stages.size(), 0);
    for (const auto& f : fifos) indeg[static_cast<std::size_t>(f.consumer)] += 1;
    std::vector<int> queue, order;
    for (std::size_t i = 0; i < stages.size(); ++i)
      if (indeg[i] == 0) queue.push_back(static_cast<int>(i));
    while (!queue.empty()) {
      int s = queue.back();
      queue.pop_back();
      order.push_back(s);
      for (int fo : stages[static_cast<std::size_t>(s)]->out_fifos) {
        int c = fifos[static_cast<std::size_t>(fo)].consumer;
        if (--indeg[static_cast<std::size_t>(c)] == 0) queue.push_back(c);
      }
    }
    if (order.size() != stages.size()) throw DataflowError("stage graph contains a cycle");
    return order;
  }

  std::string dump() const {
    std::ostringstream os;
    for (const auto& s : stages) {
      os << "stage " << s->id << " " << stage_kind_name(s->kind()) << " " << s->name() << " in=[";
      for (std::size_t i = 0; i < s->in_fifos.size(); ++i) os << (i ? "," : "") << s->in_fifos[i];
      os << "] out=[";
      for (std::size_t i = 0; i < s->out_fifos.size(); ++i)
        os << (i ? "," : "") << s->out_fifos[i];
      os << "]\n";
    }
    for (const auto& f : fifos)
      os << "fifo " << f.id << " " << f.name << " channels=" << f.channels
         << " cap=" << f.capacity << " " << f.producer << "->" << f.consumer << "\n";
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Stage implementations
// ---------------------------------------------------------------------------

namespace stages {

class ImageSource : public Stage {
 public:
  ImageSource(std::string name, int channels) : Stage(StageKind::Source, std::move(name)),
                                                channels_(channels) {}
  void bind(std::vector<Word> words, std::int64_t pixels) {
    words_ = std::move(words);
    pixels_ = pixels;
  }
  bool try_step(StageGraph& g) override {
    if (next_ >= pixels_ || !g.can_push(out_fifos[0])) return false;
    Element e(static_cast<std::size_t>(channels_));
    for (int c = 0; c < channels_; ++c)
      e[static_cast<std::size_t>(c)] = words_[static_cast<std::size_t>(c) * pixels_ + next_];
    g.push(out_fifos[0], std::move(e));
    ++next_;
    ++produced;
    return true;
  }
  bool done() const override { return next_ >= pixels_; }
  void reset() override {
    Stage::reset();
    next_ = 0;
  }

 private:
  int channels_;
  std::vector<Word> words_;  // planar
  std::int64_t pixels_ = 0;
  std::int64_t next_ = 0;
};

/// Emits the whole message as one element.
class VectorSource : public Stage {
 public:
  explicit VectorSource(std::string name) : Stage(StageKind::Source, std::move(name)) {}
  void bind(Element e) { data_ = std::move(e); }
  bool try_step(StageGraph& g) override {
    if (emitted_ || !g.can_push(out_fifos[0])) return false;
    g.push(out_fifos[0], data_);
    emitted_ = true;
    ++produced;
    return true;
  }
  bool done() const override { return emitted_; }
  void reset() override {
    Stage::reset();
    emitted_ = false;
  }

 private:
  Element data_;
  bool emitted_ = false;
};

/// Tree-MAC matrix-vector product over one input element.
class LinearStage : public Stage {
 public:
  LinearStage(std::string name, const fixed::FixedTensor* w, const fixed::FixedTensor* b,
              const fixed::FixedSpec& spec, int chunk)
      : Stage(StageKind::Conv, std::move(name)), w_(w), b_(b), spec_(spec), chunk_(chunk) {}
  bool try_step(StageGraph& g) override {
    if (fired_ || !g.can_pop(in_fifos[0]) || !g.can_push(out_fifos[0])) return false;
    Element in = g.pop(in_fifos[0]);
    ++consumed;
    const int m = w_->shape[0];
    const int n = w_->shape[1];
    Element out(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      Word acc = fixed::tree_reduce_mac(in.data(),
                                        w_->raw.data() + static_cast<std::size_t>(i) * n, n,
                                        spec_, chunk_);
      out[static_cast<std::size_t>(i)] = fixed::fixed_add(acc, b_->raw[static_cast<std::size_t>(i)], spec_);
    }
    g.push(out_fifos[0], std::move(out));
    fired_ = true;
    ++produced;
    return true;
  }
  bool done() const override { return fired_; }
  void reset() override {
    Stage::reset();
    fired_ = false;
  }

 private:
  const fixed::FixedTensor* w_;
  const fixed::FixedTensor* b_;
  fixed::FixedSpec spec_;
  int chunk_;
  bool fired_ = false;
};

/// Consumes the secret grid vector and streams it as a full-resolution
/// single-channel plane (nearest-neighbour expansion).
class GridUpsampleStage : public Stage {
 public:
  GridUpsampleStage(std::string name, int grid_h, int grid_w, int out_h, int out_w)
      : Stage(StageKind::Upsample, std::move(name)), gh_(grid_h), gw_(grid_w), oh_(out_h),
        ow_(out_w) {}
  bool try_step(StageGraph& g) override {
    if (!have_ && g.can_pop(in_fifos[0])) {
      grid_ = g.pop(in_fifos[0]);
      ++consumed;
      have_ = true;
      return true;
    }
    if (have_ && next_ < static_cast<std::int64_t>(oh_) * ow_ && g.can_push(out_fifos[0])) {
      int y = static_cast<int>(next_ / ow_), x = static_cast<int>(next_ % ow_);
      int fy = oh_ / gh_, fx = ow_ / gw_;
      Element e(1);
      e[0] = grid_[static_cast<std::size_t>((y / fy) * gw_ + (x / fx))];
      g.push(out_fifos[0], std::move(e));
      ++next_;
      ++produced;
      return true;
    }
    return false;
  }
  bool done() const override { return have_ && next_ >= static_cast<std::int64_t>(oh_) * ow_; }
  void reset() override {
    Stage::reset();
    have_ = false;
    next_ = 0;
    grid_.clear();
  }

 private:
  int gh_, gw_, oh_, ow_;
  Element grid_;
  bool have_ = false;
  std::int64_t next_ = 0;
};

/// Depthwise convolution with a K-row line buffer.
class DepthwiseStage : public Stage {
 public:
  DepthwiseStage(std::string name, const fixed::FixedTensor* kern, int C, int H, int W,
                 int stride, int pad, const fixed::FixedSpec& spec, int chunk)
      : Stage(StageKind::Conv, std::move(name)), kern_(kern), C_(C), H_(H), W_(W), K_(kern->shape[1]),
        stride_(stride), pad_(pad), spec_(spec), chunk_(chunk) {
    Ho_ = (H_ + 2 * pad_ - K_) / stride_ + 1;
    Wo_ = (W_ + 2 * pad_ - K_) / stride_ + 1;
    ring_.assign(static_cast<std::size_t>(K_) * W_ * C_, 0);
  }

  bool try_step(StageGraph& g) override {
    if (output_ready() && g.can_push(out_fifos[0])) {
      Element e(static_cast<std::size_t>(C_));
      for (int c = 0; c < C_; ++c) e[static_cast<std::size_t>(c)] = cell(c);
      g.push(out_fifos[0], std::move(e));
      ++produced;
      if (++out_col_ >= Wo_) {
        out_col_ = 0;
        ++out_row_;
      }
      return true;
    }
    if (rows_in_ < H_ && g.can_pop(in_fifos[0]) && (col_in_ > 0 || can_start_row())) {
      Element e = g.pop(in_fifos[0]);
      ++consumed;
      Word* slot = ring_.data() + (static_cast<std::size_t>(rows_in_ % K_) * W_ + col_in_) * C_;
      std::copy(e.begin(), e.end(), slot);
      if (++col_in_ >= W_) {
        col_in_ = 0;
        ++rows_in_;
      }
      return true;
    }
    return false;
  }

  bool done() const override { return out_row_ >= Ho_; }
  void reset() override {
    Stage::reset();
    rows_in_ = col_in_ = out_row_ = out_col_ = 0;
    std::fill(ring_.begin(), ring_.end(), 0);
  }

 private:
  bool output_ready() const {
    if (out_row_ >= Ho_) return false;
    int need = std::min(H_ - 1, out_row_ * stride_ - pad_ + K_ - 1);
    return rows_in_ > need;
  }
  bool can_start_row() const {
    if (rows_in_ < K_) return true;
    return rows_in_ - K_ < out_row_ * stride_ - pad_;  // evicted row no longer needed
  }
  Word cell(int c) const {
    Word vals[64], wts[64];
    int m = 0;
    const Word* kc = kern_->raw.data() + static_cast<std::size_t>(c) * K_ * K_;
    for (int u = 0; u < K_; ++u) {
      int iy = out_row_ * stride_ - pad_ + u;
      if (iy < 0 || iy >= H_) continue;
      const Word* row = ring_.data() + static_cast<std::size_t>(iy % K_) * W_ * C_;
      for (int v = 0; v < K_; ++v) {
        int ix = out_col_ * stride_ - pad_ + v;
        if (ix < 0 || ix >= W_) continue;
        vals[m] = row[ix * C_ + c];
        wts[m] = kc[u * K_ + v];
        ++m;
      }
    }
    return fixed::tree_reduce_mac(vals, wts, m, spec_, chunk_);
  }

  const fixed::FixedTensor* kern_;
  int C_, H_, W_, K_, stride_, pad_, Ho_, Wo_;
  fixed::FixedSpec spec_;
  int chunk_;
  std::vector<Word> ring_;
  int rows_in_ = 0, col_in_ = 0, out_row_ = 0, out_col_ = 0;
};

/// Per-pixel channel mix (matrix-vector MAC plus bias).
class PointwiseStage : public Stage {
 public:
  PointwiseStage(std::string name, const fixed::FixedTensor* w, const fixed::FixedTensor* b,
                 std::int64_t pixels, const fixed::FixedSpec& spec, int chunk)
      : Stage(StageKind::Conv, std::move(name)), w_(w), b_(b), pixels_(pixels), spec_(spec),
        chunk_(chunk) {}
  bool try_step(StageGraph& g) override {
    if (done() || !g.can_pop(in_fifos[0]) || !g.can_push(out_fifos[0])) return false;
    Element in = g.pop(in_fifos[0]);
    ++consumed;
    const int cout = w_->shape[0], cin = w_->shape[1];
    Element out(static_cast<std::size_t>(cout));
    qops::pointwise_cell(in.data(), cin, *w_, *b_, spec_, chunk_, out.data());
    g.push(out_fifos[0], std::move(out));
    ++produced;
    return true;
  }
  bool done() const override { return produced >= pixels_; }

 private:
  const fixed::FixedTensor* w_;
  const fixed::FixedTensor* b_;
  std::int64_t pixels_;
  fixed::FixedSpec spec_;
  int chunk_;
};

/// Per-channel affine stage, out = (v + pre) * scale + post, applied in that
/// order so the rescale stage matches the batch path bit for bit.
class AffineStage : public Stage {
 public:
  AffineStage(std::string name, std::vector<Word> scale, std::vector<Word> post, Word pre,
              std::int64_t pixels, const fixed::FixedSpec& spec)
      : Stage(StageKind::Bn, std::move(name)), scale_(std::move(scale)), post_(std::move(post)),
        pre_(pre), pixels_(pixels), spec_(spec) {}
  bool try_step(StageGraph& g) override {
    if (done() || !g.can_pop(in_fifos[0]) || !g.can_push(out_fifos[0])) return false;
    Element e = g.pop(in_fifos[0]);
    ++consumed;
    for (std::size_t c = 0; c < e.size(); ++c) {
      Word v = e[c];
      if (pre_ != 0) v = fixed::fixed_add(v, pre_, spec_);
      v = fixed::fixed_mul(v, scale_[scale_.size() == 1 ? 0 : c], spec_);
      Word post = post_[post_.size() == 1 ? 0 : c];
      if (post != 0) v = fixed::fixed_add(v, post, spec_);
      e[c] = v;
    }
    g.push(out_fifos[0], std::move(e));
    ++produced;
    return true;
  }
  bool done() const override { return produced >= pixels_; }

 private:
  std::vector<Word> scale_, post_;
  Word pre_;
  std::int64_t pixels_;
  fixed::FixedSpec spec_;
};

class ActStage : public Stage {
 public:
  enum class Fn { Relu, TanhLut };
  ActStage(std::string name, Fn fn, const fixed::TanhLut* lut, std::int64_t pixels)
      : Stage(StageKind::Act, std::move(name)), fn_(fn), lut_(lut), pixels_(pixels) {}
  bool try_step(StageGraph& g) override {
    if (done() || !g.can_pop(in_fifos[0]) || !g.can_push(out_fifos[0])) return false;
    Element e = g.pop(in_fifos[0]);
    ++consumed;
    for (auto& v : e) v = fn_ == Fn::Relu ? fixed::fixed_relu(v) : lut_->lookup(v);
    g.push(out_fifos[0], std::move(e));
    ++produced;
    return true;
  }
  bool done() const override { return produced >= pixels_; }

 private:
  Fn fn_;
  const fixed::TanhLut* lut_;
  std::int64_t pixels_;
};

/// Nearest-neighbour 2x (or fx) upsampling with a one-row buffer.
class UpsampleStage : public Stage {
 public:
  UpsampleStage(std::string name, int C, int H, int W, int factor)
      : Stage(StageKind::Upsample, std::move(name)), C_(C), H_(H), W_(W), f_(factor) {
    row_.assign(static_cast<std::size_t>(W_) * C_, 0);
  }
  bool try_step(StageGraph& g) override {
    const std::int64_t out_per_row = static_cast<std::int64_t>(W_) * f_;
    if (have_row_) {
      if (emit_ < out_per_row * f_ && g.can_push(out_fifos[0])) {
        std::int64_t j = emit_ % out_per_row;
        Element e(static_cast<std::size_t>(C_));
        const Word* src = row_.data() + static_cast<std::size_t>(j / f_) * C_;
        std::copy(src, src + C_, e.begin());
        g.push(out_fifos[0], std::move(e));
        ++emit_;
        ++produced;
        if (emit_ >= out_per_row * f_) {
          have_row_ = false;
          emit_ = 0;
          col_ = 0;
          ++rows_done_;
        }
        return true;
      }
      return false;
    }
    if (rows_done_ < H_ && g.can_pop(in_fifos[0])) {
      Element e = g.pop(in_fifos[0]);
      ++consumed;
      std::copy(e.begin(), e.end(), row_.begin() + static_cast<std::size_t>(col_) * C_);
      if (++col_ >= W_) have_row_ = true;
      return true;
    }
    return false;
  }
  bool done() const override { return rows_done_ >= H_; }
  void reset() override {
    Stage::reset();
    col_ = 0;
    emit_ = 0;
    rows_done_ = 0;
    have_row_ = false;
  }

 private:
  int C_, H_, W_, f_;
  std::vector<Word> row_;
  int col_ = 0;
  std::int64_t emit_ = 0;
  int rows_done_ = 0;
  bool have_row_ = false;
};

class ConcatStage : public Stage {
 public:
  ConcatStage(std::string name, std::int64_t pixels)
      : Stage(StageKind::Concat, std::move(name)), pixels_(pixels) {}
  bool try_step(StageGraph& g) override {
    if (done() || !g.can_pop(in_fifos[0]) || !g.can_pop(in_fifos[1]) ||
        !g.can_push(out_fifos[0]))
      return false;
    Element a = g.pop(in_fifos[0]);
    Element b = g.pop(in_fifos[1]);
    consumed += 2;
    a.insert(a.end(), b.begin(), b.end());
    g.push(out_fifos[0], std::move(a));
    ++produced;
    return true;
  }
  bool done() const override { return produced >= pixels_; }

 private:
  std::int64_t pixels_;
};

/// Duplicates its input stream so a skip connection can be read twice.
class CloneStage : public Stage {
 public:
  CloneStage(std::string name, std::int64_t pixels)
      : Stage(StageKind::Clone, std::move(name)), pixels_(pixels) {}
  bool try_step(StageGraph& g) override {
    if (done() || !g.can_pop(in_fifos[0]) || !g.can_push(out_fifos[0]) ||
        !g.can_push(out_fifos[1]))
      return false;
    Element e = g.pop(in_fifos[0]);
    ++consumed;
    g.push(out_fifos[0], e);
    g.push(out_fifos[1], std::move(e));
    produced += 2;
    return true;
  }
  bool done() const override { return produced >= 2 * pixels_; }

 private:
  std::int64_t pixels_;
};

class SinkStage : public Stage {
 public:
  SinkStage(std::string name, int channels, std::int64_t pixels)
      : Stage(StageKind::Sink, std::move(name)), channels_(channels), pixels_(pixels) {}
  bool try_step(StageGraph& g) override {
    if (done() || !g.can_pop(in_fifos[0])) return false;
    Element e = g.pop(in_fifos[0]);
    ++consumed;
    for (Word w : e) collected_.push_back(w);
    return true;
  }
  bool done() const override { return consumed >= pixels_; }
  void reset() override {
    Stage::reset();
    collected_.clear();
  }
  /// Interleaved channel words in pixel order.
  const std::vector<Word>& collected() const { return collected_; }

 private:
  int channels_;
  std::int64_t pixels_;
  std::vector<Word> collected_;
};

}  // namespace stages

// ---------------------------------------------------------------------------
// Pipeline construction
// ---------------------------------------------------------------------------

struct BuildOptions {
  int stream_capacity = 0;  // 0: rows-based default
  std::map<int, int> capacity_overrides;
};

/// Emits one stage per layer (depthwise conv, pointwise conv, BN, activation,
/// upsample, concat) plus a clone stage for every skip connection.
inline StageGraph build_pipeline(std::shared_ptr<const QuantizedEncoder> model,
                                 const BuildOptions& opt = {}) {
  const ModelConfig& cfg = model->config;
  StageGraph g;
  g.model = model;
  const fixed::FixedSpec spec = model->spec;
  const int chunk = model->mac_chunk;
  const int H = cfg.height, W = cfg.width;
  const int pad = (cfg.kernel - 1) / 2;
  const int n = static_cast<int>(model->down.size());

  auto cap_stream = [&](int width) {
    return opt.stream_capacity > 0 ? opt.stream_capacity : 2 * width + 4;
  };

  // message head: source -> linear -> grid upsample
  int f_msg = g.add_fifo("msg", cfg.message_bits, 1);
  {
    auto src = std::make_unique<stages::VectorSource>("msg_source");
    src->out_fifos = {f_msg};
    g.add_stage(std::move(src));
  }
  int f_grid = g.add_fifo("secret_grid", cfg.secret_h * cfg.secret_w, 1);
  {
    auto lin = std::make_unique<stages::LinearStage>("secret_linear", &model->secret_w,
                                                     &model->secret_b, spec, chunk);
    lin->in_fifos = {f_msg};
    lin->out_fifos = {f_grid};
    g.add_stage(std::move(lin));
  }
  int f_plane = g.add_fifo("secret_plane", 1, cap_stream(W));
  {
    auto up = std::make_unique<stages::GridUpsampleStage>("secret_upsample", cfg.secret_h,
                                                          cfg.secret_w, H, W);
    up->in_fifos = {f_grid};
    up->out_fifos = {f_plane};
    g.add_stage(std::move(up));
  }

  int f_img = g.add_fifo("image", 3, cap_stream(W));
  {
    auto src = std::make_unique<stages::ImageSource>("image_source", 3);
    src->out_fifos = {f_img};
    g.add_stage(std::move(src));
  }

  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  int f_d0 = g.add_fifo("d0", 4, cap_stream(W));
  {
    auto cat = std::make_unique<stages::ConcatStage>("input_concat", hw);
    cat->in_fifos = {f_img, f_plane};
    cat->out_fifos = {f_d0};
    g.add_stage(std::move(cat));
  }

  // down path with clone stages feeding the skip FIFOs
  struct Level {
    int fifo;      // stream continuing down/up the U
    int skip = -1; // skip branch fifo (from the clone)
    int ch;
    int h, w;
  };
  std::vector<Level> levels;
  int cur = f_d0;
  int ch = 4, h = H, w = W;
  for (int i = 0; i < n; ++i) {
    // clone the stage input for the skip connection, sized to hold the full lead
    std::int64_t plane = static_cast<std::int64_t>(h) * w;
    int skip_cap = static_cast<int>(plane);
    int fa = g.add_fifo("d" + std::to_string(i) + "_main", ch, cap_stream(w));
    int fb = g.add_fifo("d" + std::to_string(i) + "_skip", ch, skip_cap);
    {
      auto cl = std::make_unique<stages::CloneStage>("clone_d" + std::to_string(i), plane);
      cl->in_fifos = {cur};
      cl->out_fifos = {fa, fb};
      g.add_stage(std::move(cl));
    }
    levels.push_back({fa, fb, ch, h, w});

    const QuantSepLayer& layer = model->down[static_cast<std::size_t>(i)];
    int ho = (h + 2 * pad - cfg.kernel) / layer.stride + 1;
    int wo = (w + 2 * pad - cfg.kernel) / layer.stride + 1;
    std::int64_t opix = static_cast<std::int64_t>(ho) * wo;
    std::string nm = "down" + std::to_string(i + 1);

    int f_dw = g.add_fifo(nm + "_dw", ch, cap_stream(wo));
    {
      auto st = std::make_unique<stages::DepthwiseStage>(nm + "_dw", &layer.dw, ch, h, w,
                                                         layer.stride, pad, spec, chunk);
      st->in_fifos = {fa};
      st->out_fifos = {f_dw};
      g.add_stage(std::move(st));
    }
    int f_pw = g.add_fifo(nm + "_pw", layer.cout, cap_stream(wo));
    {
      auto st = std::make_unique<stages::PointwiseStage>(nm + "_pw", &layer.pw_w, &layer.pw_b,
                                                         opix, spec, chunk);
      st->in_fifos = {f_dw};
      st->out_fifos = {f_pw};
      g.add_stage(std::move(st));
    }
    int f_bn = g.add_fifo(nm + "_bn", layer.cout, cap_stream(wo));
    {
      auto st = std::make_unique<stages::AffineStage>(nm + "_bn", layer.bn_scale.raw,
                                                      layer.bn_shift.raw, 0, opix, spec);
      st->in_fifos = {f_pw};
      st->out_fifos = {f_bn};
      g.add_stage(std::move(st));
    }
    int f_act = g.add_fifo(nm + "_relu", layer.cout, cap_stream(wo));
    {
      auto st = std::make_unique<stages::ActStage>(nm + "_relu", stages::ActStage::Fn::Relu,
                                                   nullptr, opix);
      st->in_fifos = {f_bn};
      st->out_fifos = {f_act};
      g.add_stage(std::move(st));
    }
    cur = f_act;
    ch = layer.cout;
    h = ho;
    w = wo;
  }

  // up path: upsample (where the mirrored block strided), concat skip, conv
  for (int i = 0; i < n; ++i) {
    const Level& lv = levels[static_cast<std::size_t>(n - 1 - i)];
    int mirrored = model->down[static_cast<std::size_t>(n - 1 - i)].stride;
    std::string nm = "up" + std::to_string(i + 1);
    if (mirrored > 1) {
      int f_up = g.add_fifo(nm + "_upsample", ch, cap_stream(w * mirrored));
      auto st = std::make_unique<stages::UpsampleStage>(nm + "_upsample", ch, h, w, mirrored);
      st->in_fifos = {cur};
      st->out_fifos = {f_up};
      g.add_stage(std::move(st));
      cur = f_up;
      h *= mirrored;
      w *= mirrored;
    }
    std::int64_t opix = static_cast<std::int64_t>(h) * w;
    int f_cat = g.add_fifo(nm + "_concat", ch + lv.ch, cap_stream(w));
    {
      auto st = std::make_unique<stages::ConcatStage>(nm + "_concat", opix);
      st->in_fifos = {cur, lv.skip};
      st->out_fifos = {f_cat};
      g.add_stage(std::move(st));
    }
    const QuantSepLayer& layer = model->up[static_cast<std::size_t>(i)];
    int f_dw = g.add_fifo(nm + "_dw", layer.cin, cap_stream(w));
    {
      auto st = std::make_unique<stages::DepthwiseStage>(nm + "_dw", &layer.dw, layer.cin, h, w,
                                                         1, pad, spec, chunk);
      st->in_fifos = {f_cat};
      st->out_fifos = {f_dw};
      g.add_stage(std::move(st));
    }
    int f_pw = g.add_fifo(nm + "_pw", layer.cout, cap_stream(w));
    {
      auto st = std::make_unique<stages::PointwiseStage>(nm + "_pw", &layer.pw_w, &layer.pw_b,
                                                         opix, spec, chunk);
      st->in_fifos = {f_dw};
      st->out_fifos = {f_pw};
      g.add_stage(std::move(st));
    }
    int f_bn = g.add_fifo(nm + "_bn", layer.cout, cap_stream(w));
    {
      auto st = std::make_unique<stages::AffineStage>(nm + "_bn", layer.bn_scale.raw,
                                                      layer.bn_shift.raw, 0, opix, spec);
      st->in_fifos = {f_pw};
      st->out_fifos = {f_bn};
      g.add_stage(std::move(st));
    }
    int f_act = g.add_fifo(nm + "_relu", layer.cout, cap_stream(w));
    {
      auto st = std::make_unique<stages::ActStage>(nm + "_relu", stages::ActStage::Fn::Relu,
                                                   nullptr, opix);
      st->in_fifos = {f_bn};
      st->out_fifos = {f_act};
      g.add_stage(std::move(st));
    }
    cur = f_act;
    ch = layer.cout;
  }

  // output head: separable conv to RGB, tanh, rescale to [0,1]
  {
    const QuantSepLayer& layer = model->out;
    int f_dw = g.add_fifo("out_dw", layer.cin, cap_stream(w));
    auto st1 = std::make_unique<stages::DepthwiseStage>("out_dw", &layer.dw, layer.cin, h, w, 1,
                                                        pad, spec, chunk);
    st1->in_fifos = {cur};
    st1->out_fifos = {f_dw};
    g.add_stage(std::move(st1));
    int f_pw = g.add_fifo("out_pw", 3, cap_stream(w));
    auto st2 = std::make_unique<stages::PointwiseStage>("out_pw", &layer.pw_w, &layer.pw_b, hw,
                                                        spec, chunk);
    st2->in_fifos = {f_dw};
    st2->out_fifos = {f_pw};
    g.add_stage(std::move(st2));
    int f_tanh = g.add_fifo("out_tanh", 3, cap_stream(w));
    auto st3 = std::make_unique<stages::ActStage>("out_tanh", stages::ActStage::Fn::TanhLut,
                                                  &model->lut, hw);
    st3->in_fifos = {f_pw};
    st3->out_fifos = {f_tanh};
    g.add_stage(std::move(st3));
    int f_final = g.add_fifo("out_rescale", 3, cap_stream(w));
    std::vector<Word> sc{fixed::quantize(0.5, spec)};
    std::vector<Word> post{0};
    auto st4 = std::make_unique<stages::AffineStage>("out_rescale", sc, post,
                                                     fixed::quantize(1.0, spec), hw, spec);
    st4->in_fifos = {f_tanh};
    st4->out_fifos = {f_final};
    g.add_stage(std::move(st4));
    auto sink = std::make_unique<stages::SinkStage>("sink", 3, hw);
    sink->in_fifos = {f_final};
    g.add_stage(std::move(sink));
  }

  for (const auto& [id, cap] : opt.capacity_overrides)
    g.fifos.at(static_cast<std::size_t>(id)).capacity = cap;
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

enum class Schedule { RoundRobin, ReverseRoundRobin, RandomPermutation, TopoOrder };

/// Streams one (image, message) pair through the graph. The output is
/// bit-identical to fixed_encoder_forward for every fair schedule; a blocked
/// graph (all stages stuck with work remaining) raises a DataflowError naming
/// the blocked stages.
inline ImageU8 run_streaming(StageGraph& g, const ImageU8& img, const BitMessage& msg,
                             Schedule sched = Schedule::RoundRobin, std::uint64_t seed = 0,
                             RunReport* report = nullptr) {
  const ModelConfig& cfg = g.model->config;
  if (img.height != cfg.height || img.width != cfg.width || !img.valid())
    throw std::invalid_argument("run_streaming: image does not match the model size");
  if (static_cast<int>(msg.length()) != cfg.message_bits)
    throw std::invalid_argument("run_streaming: message length mismatch");
  const fixed::FixedSpec& spec = g.model->spec;
  g.reset();

  // bind sources (same input quantization as the batch path)
  const std::int64_t hw = static_cast<std::int64_t>(cfg.height) * cfg.width;
  stages::ImageSource* img_src = nullptr;
  stages::VectorSource* msg_src = nullptr;
  for (auto& st : g.stages) {
    if (auto* p = dynamic_cast<stages::ImageSource*>(st.get())) img_src = p;
    if (auto* p = dynamic_cast<stages::VectorSource*>(st.get())) msg_src = p;
  }
  if (!img_src || !msg_src)
    throw std::logic_error("run_streaming: graph lacks image/message sources");
  {
    std::vector<Word> planar(static_cast<std::size_t>(hw) * 3);
    for (std::int64_t i = 0; i < hw; ++i)
      for (int c = 0; c < 3; ++c)
        planar[static_cast<std::size_t>(c * hw + i)] =
            fixed::quantize(img.data[static_cast<std::size_t>(i * 3 + c)] / 255.0, spec);
    img_src->bind(std::move(planar), hw);
  }
  {
    Element bits(msg.length());
    for (std::size_t j = 0; j < msg.length(); ++j)
      bits[j] = fixed::quantize(msg.bits[j], spec);
    msg_src->bind(std::move(bits));
  }

  std::vector<int> order(g.stages.size());
  std::iota(order.begin(), order.end(), 0);
  if (sched == Schedule::ReverseRoundRobin) std::reverse(order.begin(), order.end());
  if (sched == Schedule::TopoOrder) order = g.topological_order();
  Rng rng(Rng::mix(seed, 0xdf10));

  auto all_done = [&] {
    for (const auto& s : g.stages)
      if (!s->done()) return false;
    return true;
  };

  long sweeps = 0;
  while (true) {
    if (sched == Schedule::RandomPermutation) {
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1],
                  order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }
    bool progressed = false;
    for (int sid : order)
      while (g.stages[static_cast<std::size_t>(sid)]->try_step(g)) progressed = true;
    ++sweeps;
    if (!progressed) {
      if (all_done()) break;
      std::ostringstream os;
      os << "dataflow deadlock: no stage can progress; blocked stages:";
      for (const auto& s : g.stages)
        if (!s->done()) os << " " << s->name();
      throw DataflowError(os.str());
    }
  }

  if (report) {
    report->sweeps = sweeps;
    for (const auto& s : g.stages)
      report->stages.push_back({s->id, s->name(), stage_kind_name(s->kind()), s->consumed,
                                s->produced});
    for (const auto& f : g.fifos)
      report->fifos.push_back({f.id, f.name, f.capacity, f.pushed, f.popped, f.high_water,
                               f.lead});
  }

  // convert collected words exactly like the batch path
  auto* sink = dynamic_cast<stages::SinkStage*>(g.stages.back().get());
  if (!sink) throw std::logic_error("run_streaming: last stage is not the sink");
  const auto& words = sink->collected();
  ImageU8 out;
  out.height = cfg.height;
  out.width = cfg.width;
  out.data.resize(static_cast<std::size_t>(hw) * 3);
  for (std::int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) {
      double v = std::clamp(fixed::dequantize(words[static_cast<std::size_t>(i * 3 + c)], spec),
                            0.0, 1.0);
      out.data[static_cast<std::size_t>(i * 3 + c)] =
          static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return out;
}

/// Conservation check: every FIFO's pushes equal its pops, and stage totals
/// reconcile with their FIFO endpoints.
inline void verify_conservation(const RunReport& report) {
  for (const auto& f : report.fifos)
    if (f.pushed != f.popped)
      throw DataflowError("fifo " + f.name + " did not drain: pushed " +
                          std::to_string(f.pushed) + " popped " + std::to_string(f.popped));
}

/// Greedy per-FIFO binary search for the smallest deadlock-free capacities
/// under the reference (round-robin) schedule.
inline std::map<int, int> min_fifo_depths(StageGraph& g, const ImageU8& img,
                                          const BitMessage& msg) {
  RunReport base;
  run_streaming(g, img, msg, Schedule::RoundRobin, 0, &base);
  std::map<int, int> caps;
  for (const auto& f : g.fifos) caps[f.id] = f.capacity;

  auto runs_clean = [&]() {
    try {
      run_streaming(g, img, msg, Schedule::RoundRobin, 0, nullptr);
      return true;
    } catch (const DataflowError&) {
      return false;
    }
  };

  for (const auto& fr : base.fifos) {
    int lo = 1, hi = std::max(1, fr.high_water);
    while (lo < hi) {
      int mid = lo + (hi - lo) / 2;
      g.fifos[static_cast<std::size_t>(fr.id)].capacity = mid;
      if (runs_clean())
        hi = mid;
      else
        lo = mid + 1;
    }
    g.fifos[static_cast<std::size_t>(fr.id)].capacity = lo;
    caps[fr.id] = lo;
  }
  if (!runs_clean()) throw DataflowError("min_fifo_depths: minimized configuration deadlocks");
  return caps;
}

}  // namespace dataflow
}  // namespace faststamp
