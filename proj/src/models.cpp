#include "gconv/models.hpp"

#include <cmath>

#include "json.hpp"

namespace gconv {

void ArchSpec::validate() const {
  if (d_z < 1) throw ValueError("arch: d_z must be >= 1");
  if (resolution == 0) {
    if (toy_widths.empty()) throw ValueError("arch: toy nets need at least one layer width");
    for (int w : toy_widths)
      if (w < 1) throw ValueError("arch: toy layer widths must be >= 1");
    if (data_dim < 1) throw ValueError("arch: data_dim must be >= 1");
    return;
  }
  if (resolution != 32 && resolution != 128 && resolution != 256)
    throw ValueError("arch: unsupported resolution " + std::to_string(resolution));
  if (stages.empty()) throw ValueError("arch: image models need at least one stage");
  for (const Stage& s : stages)
    if (s.channels < 1) throw ValueError("arch: stage widths must be >= 1");
  if (image_channels < 1) throw ValueError("arch: image_channels must be >= 1");
  if (role == Role::generator) {
    if (fc_channels < 1) throw ValueError("arch: generator stem width must be >= 1");
    int size = 4;
    for (const Stage& s : stages)
      if (s.resample) size *= 2;
    if (size != resolution)
      throw ValueError("arch: stages reach " + std::to_string(size) + "x" + std::to_string(size) +
                       ", not " + std::to_string(resolution));
  } else {
    int size = resolution;
    for (const Stage& s : stages)
      if (s.resample) size /= 2;
    if (size < 1) throw ValueError("arch: discriminator downsamples below 1x1");
  }
}

ArchSpec make_arch(int resolution, Role role, ConvKind kind) {
  ArchSpec s;
  s.resolution = resolution;
  s.role = role;
  s.kind = kind;
  if (resolution == 0) {
    s.toy_widths = role == Role::generator ? std::vector<int>{128, 128, 128, 2}
                                           : std::vector<int>{128, 128, 128, 1};
    return s;
  }
  if (role == Role::generator) {
    switch (resolution) {
      case 32:
        s.fc_channels = 256;
        s.stages = {{256, true}, {256, true}, {256, true}};
        break;
      case 128:
        s.fc_channels = 512;
        s.stages = {{512, true}, {512, true}, {256, true}, {128, true}, {64, true}};
        break;
      case 256:
        s.fc_channels = 512;
        s.stages = {{512, true}, {512, true}, {256, true}, {128, true}, {64, true}, {32, true}};
        break;
      default:
        throw ValueError("arch: unsupported resolution " + std::to_string(resolution));
    }
  } else {
    switch (resolution) {
      case 32:
        s.stages = {{128, true}, {128, true}, {128, false}, {128, false}};
        break;
      case 128:
        s.stages = {{64, true}, {128, true}, {256, true}, {512, true}, {512, true}, {512, false}};
        break;
      case 256:
        s.stages = {{32, true},  {64, true},  {128, true}, {256, true},
                    {512, true}, {512, true}, {512, false}};
        break;
      default:
        throw ValueError("arch: unsupported resolution " + std::to_string(resolution));
    }
  }
  s.validate();
  return s;
}

namespace {

void trace_row(std::vector<ShapeTraceRow>* trace, const std::string& name, const Tensor& x) {
  if (trace) trace->push_back({name, x.shape});
}

}  // namespace

// --- toy nets -------------------------------------------------------------------------

ToyGenerator::ToyGenerator(const ArchSpec& spec, Rng* rng) : kind(spec.kind), d_z(spec.d_z) {
  if (spec.resolution != 0 || spec.role != Role::generator)
    throw ValueError("toy generator: spec is not a toy generator spec");
  spec.validate();
  int in = spec.d_z;
  for (size_t i = 0; i + 1 < spec.toy_widths.size(); ++i) {
    const int w = spec.toy_widths[i];
    const std::string name = "g.h" + std::to_string(i + 1);
    if (kind == ConvKind::conv)
      hidden_c.emplace_back(name, in, w, rng);
    else
      hidden_g.emplace_back(name, in, w, spec.d_z, rng);
    in = w;
  }
  out = Dense("g.out", in, spec.toy_widths.back(), rng);
}

Tensor ToyGenerator::forward(Tape* t, const Tensor& z,
                             std::vector<ShapeTraceRow>* trace) const {
  trace_row(trace, "z", z);
  std::string at = "g";
  try {
    Tensor x = z;
    const size_t hidden = kind == ConvKind::conv ? hidden_c.size() : hidden_g.size();
    for (size_t i = 0; i < hidden; ++i) {
      at = "g.h" + std::to_string(i + 1);
      x = kind == ConvKind::conv ? relu(hidden_c[i].forward(t, x))
                                 : relu(hidden_g[i].forward(t, x, z));
      trace_row(trace, at, x);
    }
    at = "g.out";
    x = out.forward(t, x);
    trace_row(trace, at, x);
    return x;
  } catch (ShapeError& e) {
    throw ShapeError(at + ": " + e.what());
  }
}

void ToyGenerator::collect_params(std::vector<Param*>& ps) {
  for (auto& l : hidden_c) l.collect_params(ps);
  for (auto& l : hidden_g) l.collect_params(ps);
  out.collect_params(ps);
}

ToyDiscriminator::ToyDiscriminator(const ArchSpec& spec, Rng* rng) {
  if (spec.resolution != 0 || spec.role != Role::discriminator)
    throw ValueError("toy discriminator: spec is not a toy discriminator spec");
  spec.validate();
  int in = spec.data_dim;
  for (size_t i = 0; i < spec.toy_widths.size(); ++i) {
    const bool last = i + 1 == spec.toy_widths.size();
    const std::string name = last ? "d.out" : "d.h" + std::to_string(i + 1);
    layers.emplace_back(name, in, spec.toy_widths[i], rng);
    in = spec.toy_widths[i];
  }
}

Tensor ToyDiscriminator::forward(Tape* t, const Tensor& x,
                                 std::vector<ShapeTraceRow>* trace) const {
  trace_row(trace, "x", x);
  std::string at = "d";
  try {
    Tensor h = x;
    for (size_t i = 0; i < layers.size(); ++i) {
      const bool last = i + 1 == layers.size();
      at = last ? "d.out" : "d.h" + std::to_string(i + 1);
      h = layers[i].forward(t, h);
      if (!last) h = relu(h);
      trace_row(trace, at, h);
    }
    return h;
  } catch (ShapeError& e) {
    throw ShapeError(at + ": " + e.what());
  }
}

void ToyDiscriminator::collect_params(std::vector<Param*>& ps) {
  for (auto& l : layers) l.collect_params(ps);
}

// --- image nets -----------------------------------------------------------------------

ImageGenerator::ImageGenerator(const ArchSpec& s, Rng* rng) : spec(s) {
  if (s.resolution == 0 || s.role != Role::generator)
    throw ValueError("image generator: spec is not an image generator spec");
  s.validate();
  fc = Dense("g.fc", s.d_z, 4 * 4 * s.fc_channels, rng);
  int ch = s.fc_channels;
  blocks.reserve(s.stages.size());
  for (size_t i = 0; i < s.stages.size(); ++i) {
    blocks.emplace_back("g.rb" + std::to_string(i + 1), ch, s.stages[i].channels, s.d_z, s.kind,
                        s.stages[i].resample, rng);
    ch = s.stages[i].channels;
  }
  bn_out = BatchNorm("g.bn_out", ch);
  conv_out = Conv2dLayer("g.conv_out", 3, 3, ch, s.image_channels, rng);
}

Tensor ImageGenerator::forward(Tape* t, const Tensor& z, bool train,
                               std::vector<ShapeTraceRow>* trace) {
  trace_row(trace, "z", z);
  std::string at = "g.fc";
  try {
    Tensor x = fc.forward(t, z);
    x = reshape(x, {z.shape[0], 4, 4, spec.fc_channels});
    trace_row(trace, at, x);
    for (size_t i = 0; i < blocks.size(); ++i) {
      at = "g.rb" + std::to_string(i + 1);
      x = blocks[i].forward(t, x, z, train);
      trace_row(trace, at, x);
    }
    at = "g.bn_out";
    x = relu(bn_out.forward(t, x, train));
    trace_row(trace, at, x);
    at = "g.conv_out";
    x = tanh_of(conv_out.forward(t, x));
    trace_row(trace, at, x);
    return x;
  } catch (ShapeError& e) {
    throw ShapeError(at + ": " + e.what());
  }
}

void ImageGenerator::collect_params(std::vector<Param*>& ps) {
  fc.collect_params(ps);
  for (auto& b : blocks) b.collect_params(ps);
  bn_out.collect_params(ps);
  conv_out.collect_params(ps);
}

ImageDiscriminator::ImageDiscriminator(const ArchSpec& s, Rng* rng) : spec(s) {
  if (s.resolution == 0 || s.role != Role::discriminator)
    throw ValueError("image discriminator: spec is not an image discriminator spec");
  s.validate();
  int ch = s.image_channels;
  blocks.reserve(s.stages.size());
  for (size_t i = 0; i < s.stages.size(); ++i) {
    blocks.emplace_back("d.rb" + std::to_string(i + 1), ch, s.stages[i].channels,
                        s.stages[i].resample, i == 0, rng);
    ch = s.stages[i].channels;
  }
  head = Dense("d.head", ch, 1, rng);
  sn_head.init(ch, 1, rng);
}

Tensor ImageDiscriminator::forward(Tape* t, const Tensor& X, bool update_estimate,
                                   std::vector<ShapeTraceRow>* trace) {
  trace_row(trace, "x", X);
  std::string at = "d";
  try {
    Tensor h = X;
    for (size_t i = 0; i < blocks.size(); ++i) {
      at = "d.rb" + std::to_string(i + 1);
      h = blocks[i].forward(t, h, update_estimate);
      trace_row(trace, at, h);
    }
    at = "d.head";
    h = sum_spatial(relu(h));
    Tensor w = sn_head.normalized(t, head.W, head.in, head.out, update_estimate ? 1 : 0);
    h = head.forward_with_weight(t, h, w);
    trace_row(trace, at, h);
    return h;
  } catch (ShapeError& e) {
    throw ShapeError(at + ": " + e.what());
  }
}

void ImageDiscriminator::collect_params(std::vector<Param*>& ps) {
  for (auto& b : blocks) b.collect_params(ps);
  head.collect_params(ps);
}

// --- toy pair -------------------------------------------------------------------------

ToyGan::ToyGan(ConvKind kind, int d_z, uint64_t seed) {
  Rng rng(seed);
  ArchSpec gs = make_arch(0, Role::generator, kind);
  gs.d_z = d_z;
  ArchSpec ds = make_arch(0, Role::discriminator, ConvKind::conv);
  gen = ToyGenerator(gs, &rng);
  dis = ToyDiscriminator(ds, &rng);
}

std::vector<Param*> ToyGan::gen_params() {
  std::vector<Param*> ps;
  gen.collect_params(ps);
  return ps;
}

std::vector<Param*> ToyGan::dis_params() {
  std::vector<Param*> ps;
  dis.collect_params(ps);
  return ps;
}

std::vector<Param*> ToyGan::all_params() {
  std::vector<Param*> ps;
  gen.collect_params(ps);
  dis.collect_params(ps);
  return ps;
}

// --- weight accounting ------------------------------------------------------------------

ParamReport count_weights(const ArchSpec& spec, CountPolicy policy) {
  spec.validate();
  ParamReport r;
  r.resolution = spec.resolution;
  r.kind = spec.kind;
  r.policy = policy;

  auto add = [&](const std::string& name, std::vector<int> shape) {
    const size_t c = numel(shape);
    r.layers.push_back({name, std::move(shape), c});
    r.total_weights += c;
    return c;
  };

  if (policy == CountPolicy::all) {
    // Enumerate the real parameter set off a zero-initialized build.
    std::vector<Param*> ps;
    if (spec.resolution == 0) {
      if (spec.role == Role::generator) {
        ToyGenerator g(spec, nullptr);
        g.collect_params(ps);
        for (Param* p : ps) add(p->name, p->value.shape);
      } else {
        ToyDiscriminator d(spec, nullptr);
        d.collect_params(ps);
        for (Param* p : ps) add(p->name, p->value.shape);
      }
    } else if (spec.role == Role::generator) {
      ImageGenerator g(spec, nullptr);
      g.collect_params(ps);
      for (Param* p : ps) add(p->name, p->value.shape);
    } else {
      ImageDiscriminator d(spec, nullptr);
      d.collect_params(ps);
      for (Param* p : ps) add(p->name, p->value.shape);
    }
    return r;
  }

  // conv_only: residual blocks' internal 3x3 convs, plus the generator's
  // output conv. Computed from the plan alone.
  if (spec.resolution == 0) return r;  // the toy nets have no such convs
  const bool gen_side = spec.role == Role::generator;
  const bool gconv = gen_side && spec.kind == ConvKind::gconv;
  int ch = gen_side ? spec.fc_channels : spec.image_channels;
  for (size_t i = 0; i < spec.stages.size(); ++i) {
    const int n = spec.stages[i].channels;
    const std::string rb =
        (gen_side ? "g.rb" : "d.rb") + std::to_string(i + 1);
    const int ms[2] = {ch, n};
    for (int j = 0; j < 2; ++j) {
      const int m = ms[j];
      const std::string conv = rb + (j == 0 ? ".c1" : ".c2");
      r.conv_weights += add(conv + ".K", {3, 3, m, n});
      if (gen_side) r.gconv_extra += size_t(m + spec.d_z) * n + size_t(n) * n;
      if (gconv) {
        r.conv_weights += add(conv + ".Ws", {m + spec.d_z, n});
        r.conv_weights += add(conv + ".WL", {n, n});
      }
    }
    ch = n;
  }
  if (gen_side) r.conv_weights += add("g.conv_out.K", {3, 3, ch, spec.image_channels});
  return r;
}

std::string param_report_json(const ParamReport& r) {
  nlohmann::ordered_json j;
  j["resolution"] = r.resolution;
  j["conv_kind"] = to_string(r.kind);
  j["conv_weights"] = r.conv_weights;
  j["gconv_extra"] = r.gconv_extra;
  j["layers"] = nlohmann::ordered_json::array();
  for (const LayerCount& l : r.layers)
    j["layers"].push_back({{"name", l.name}, {"shape", l.shape}, {"count", l.count}});
  return j.dump(2);
}

std::vector<ShapeTraceRow> shape_audit(const ArchSpec& spec) {
  spec.validate();
  std::vector<ShapeTraceRow> rows;
  if (spec.resolution == 0) {
    if (spec.role == Role::generator) {
      ToyGenerator g(spec, nullptr);
      g.forward(nullptr, Tensor({2, spec.d_z}), &rows);
    } else {
      ToyDiscriminator d(spec, nullptr);
      d.forward(nullptr, Tensor({2, spec.data_dim}), &rows);
    }
    return rows;
  }
  if (spec.role == Role::generator) {
    ImageGenerator g(spec, nullptr);
    g.forward(nullptr, Tensor({2, spec.d_z}), /*train=*/false, &rows);
  } else {
    ImageDiscriminator d(spec, nullptr);
    d.forward(nullptr, Tensor({2, spec.resolution, spec.resolution, spec.image_channels}),
              /*update_estimate=*/false, &rows);
  }
  return rows;
}

}  // namespace gconv
