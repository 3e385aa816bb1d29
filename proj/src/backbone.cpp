#include "dfm/backbone.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "dfm/random.hpp"

namespace dfm {

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  fill_normal(t.mutable_data(), 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
  return t;
}

}  // namespace

void BackboneSpec::validate() const {
  if (input_channels == 0 || output_channels == 0) throw std::invalid_argument("backbone: channel counts must be >= 1");
  if (stage_widths.empty()) throw std::invalid_argument("backbone: at least one stage is required");
  for (auto w : stage_widths) {
    if (w == 0) throw std::invalid_argument("backbone: stage widths must be >= 1");
  }
  const std::size_t s = total_stride();
  if (height % s != 0 || width % s != 0) {
    throw ShapeError("backbone: resolution " + std::to_string(height) + "x" + std::to_string(width) +
                     " not divisible by total stride " + std::to_string(s));
  }
}

std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.numel();
  return n;
}

std::size_t norm_groups(std::size_t channels) {
  for (std::size_t g = std::min<std::size_t>(8, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

Backbone::Backbone(BackboneSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng = make_rng(seed, "backbone");
  auto conv = [&](std::size_t in, std::size_t out, std::size_t k, std::size_t stride, bool bias) {
    Conv c;
    c.weight = he_normal({out, in, k, k}, in * k * k, rng);
    if (bias) c.bias = Tensor::zeros({out}, true);
    c.params = {stride, k / 2};
    return c;
  };
  auto norm = [](std::size_t ch) {
    return Norm{Tensor::full({ch}, 1.0, true), Tensor::zeros({ch}, true), norm_groups(ch)};
  };
  std::size_t in = spec_.input_channels;
  for (std::size_t w : spec_.stage_widths) {
    Stage s;
    s.down = conv(in, w, 3, 2, true);
    s.norm_a = norm(w);
    s.conv_a = conv(w, w, 3, 1, false);
    s.norm_b = norm(w);
    s.conv_b = conv(w, w, 3, 1, true);
    stages_.push_back(std::move(s));
    in = w;
  }
  final_norm_ = norm(in);
  project_ = conv(in, spec_.output_channels, 1, 1, true);
}

Tensor Backbone::apply(const Conv& c, const Tensor& x) { return conv2d(x, c.weight, c.bias, c.params); }

Tensor Backbone::apply(const Norm& n, const Tensor& x) { return group_norm(x, n.gamma, n.beta, n.groups); }

Tensor Backbone::operator()(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(0) != spec_.input_channels || x.dim(1) != spec_.height || x.dim(2) != spec_.width) {
    throw ShapeError("backbone: expected input (" + std::to_string(spec_.input_channels) + "," +
                     std::to_string(spec_.height) + "," + std::to_string(spec_.width) + "), got " +
                     shape_str(x.shape()));
  }
  Tensor h = x;
  for (const auto& s : stages_) {
    h = apply(s.down, h);
    Tensor r = apply(s.conv_a, relu(apply(s.norm_a, h)));
    r = apply(s.conv_b, relu(apply(s.norm_b, r)));
    h = add(h, r);
  }
  return apply(project_, relu(apply(final_norm_, h)));
}

ParameterList Backbone::parameters() const {
  ParameterList out;
  auto push_conv = [&](const std::string& name, const Conv& c) {
    out.push_back({name + ".weight", c.weight});
    if (c.bias.defined()) out.push_back({name + ".bias", c.bias});
  };
  auto push_norm = [&](const std::string& name, const Norm& n) {
    out.push_back({name + ".gamma", n.gamma});
    out.push_back({name + ".beta", n.beta});
  };
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string p = "backbone.stage" + std::to_string(i);
    push_conv(p + ".down", stages_[i].down);
    push_norm(p + ".norm_a", stages_[i].norm_a);
    push_conv(p + ".conv_a", stages_[i].conv_a);
    push_norm(p + ".norm_b", stages_[i].norm_b);
    push_conv(p + ".conv_b", stages_[i].conv_b);
  }
  push_norm("backbone.final_norm", final_norm_);
  push_conv("backbone.project", project_);
  return out;
}

Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed) { return Backbone(spec, seed); }

Head::Head(TaskKind kind, std::size_t in_channels, std::size_t classes, std::size_t out_h, std::size_t out_w,
           std::uint64_t seed)
    : kind_(kind), in_channels_(in_channels), classes_(classes), out_h_(out_h), out_w_(out_w) {
  if (in_channels == 0 || classes < 2) throw std::invalid_argument("head: need >= 1 input channel and >= 2 classes");
  Rng rng = make_rng(seed, "head");
  Shape ws = kind == TaskKind::kClassifier ? Shape{classes, in_channels} : Shape{classes, in_channels, 1, 1};
  weight_ = Tensor::zeros(ws, true);
  fill_normal(weight_.mutable_data(), 0.0, std::sqrt(1.0 / static_cast<double>(in_channels)), rng);
  bias_ = Tensor::zeros({classes}, true);
}

ParameterList Head::parameters() const { return {{"head.weight", weight_}, {"head.bias", bias_}}; }

Tensor Head::operator()(const Tensor& u) const {
  if (u.rank() != 3 || u.dim(0) != in_channels_) {
    throw ShapeError("head: expected " + std::to_string(in_channels_) + " input channels, got shape " +
                     shape_str(u.shape()));
  }
  if (kind_ == TaskKind::kClassifier) {
    Tensor pooled = reshape(global_avg_pool(u), {in_channels_, 1});
    return add(reshape(matmul(weight_, pooled), {classes_}), bias_);
  }
  return upsample_nearest(conv2d(u, weight_, bias_, {1, 0}), out_h_, out_w_);
}

Tensor forward_head(const Head& head, const Tensor& u) { return head(u); }

FeedforwardModel::FeedforwardModel(BackboneSpec spec, std::size_t classes, std::uint64_t seed)
    : backbone_(spec, seed),
      head_(spec.kind, spec.output_channels, classes, spec.height, spec.width, stream_seed(seed, "ff-head", 0)) {}

Tensor FeedforwardModel::predict(const Tensor& x, std::uint64_t) const { return head_(backbone_(x)); }

Tensor FeedforwardModel::single_pass(const Tensor& x, std::uint64_t seed) const { return predict(x, seed); }

ParameterList FeedforwardModel::parameters() const {
  ParameterList out = backbone_.parameters();
  for (auto& p : head_.parameters()) out.push_back(p);
  return out;
}

CostReport count_cost(const Model& model, const Shape& input_shape, std::size_t steps, CostOptions options) {
  CostReport report;
  report.parameter_count = parameter_count(model.parameters());
  NoGradGuard guard;
  Tensor probe = Tensor::full(input_shape, 0.5);
  const std::uint64_t before = flops::counted();
  model.single_pass(probe, 0);
  const std::uint64_t pass = flops::counted() - before;
  report.flops_per_forward = model.recurrent() ? pass * steps : pass;

  if (options.measure_time && options.timed_batches > 0) {
    Rng rng = make_rng(0, "cost-input");
    std::vector<Tensor> batch;
    for (std::size_t i = 0; i < options.batch_size; ++i) {
      Tensor x = Tensor::zeros(input_shape);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (double& v : x.mutable_data()) v = u(rng);
      batch.push_back(x);
    }
    auto run_batch = [&] {
      for (std::size_t i = 0; i < batch.size(); ++i) model.predict(batch[i], i);
    };
    for (std::size_t i = 0; i < options.warmup_batches; ++i) run_batch();
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < options.timed_batches; ++i) run_batch();
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    report.mean_batch_seconds = elapsed.count() / static_cast<double>(options.timed_batches);
  }
  return report;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterList& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write("DFM1", 4);
  for (const auto& p : params) {
    put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u32(os, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : p.value.data()) put_f64(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

ParameterList load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DFM1", 4) != 0) throw std::runtime_error("checkpoint: bad magic");
  ParameterList out;
  while (is.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t len = get_u32(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("checkpoint: truncated name");
    const std::uint32_t rank = get_u32(is);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get_u32(is));
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = get_f64(is);
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

void restore_parameters(const ParameterList& params, const ParameterList& stored) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& p : stored) by_name[p.name] = &p.value;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing parameter " + p.name);
    if (it->second->shape() != p.value.shape()) {
      throw ShapeError("checkpoint: parameter " + p.name + " has shape " + shape_str(it->second->shape()) +
                       ", model expects " + shape_str(p.value.shape()));
    }
    Tensor target = p.value;
    std::copy(it->second->data().begin(), it->second->data().end(), target.mutable_data().begin());
  }
}

}  // namespace dfm
