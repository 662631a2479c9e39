#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "gconv/models.hpp"
#include "gconv/rng.hpp"
#include "json.hpp"

using namespace gconv;

namespace {

using Rows = std::vector<std::pair<std::string, std::vector<int>>>;

void check_trace(const std::vector<ShapeTraceRow>& got, const Rows& want) {
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].name == want[i].first);
    CHECK(got[i].shape == want[i].second);
  }
}

// Expected generator trace, derived from the stage list alone: the stem lands
// on a 4x4 grid and every resampling stage doubles it.
Rows gen_rows(const ArchSpec& s) {
  Rows want{{"z", {2, s.d_z}}, {"g.fc", {2, 4, 4, s.fc_channels}}};
  int size = 4;
  for (size_t i = 0; i < s.stages.size(); ++i) {
    if (s.stages[i].resample) size *= 2;
    want.push_back({"g.rb" + std::to_string(i + 1), {2, size, size, s.stages[i].channels}});
  }
  want.push_back({"g.bn_out", {2, size, size, s.stages.back().channels}});
  want.push_back({"g.conv_out", {2, size, size, s.image_channels}});
  return want;
}

Rows disc_rows(const ArchSpec& s) {
  Rows want{{"x", {2, s.resolution, s.resolution, s.image_channels}}};
  int size = s.resolution;
  for (size_t i = 0; i < s.stages.size(); ++i) {
    if (s.stages[i].resample) size /= 2;
    want.push_back({"d.rb" + std::to_string(i + 1), {2, size, size, s.stages[i].channels}});
  }
  want.push_back({"d.head", {2, 1}});
  return want;
}

// Recounts the residual-block convolutions directly from the stage list.
struct ConvCounts {
  size_t conv = 0;
  size_t extra = 0;
};

ConvCounts conv_count_oracle(const ArchSpec& s) {
  ConvCounts cc;
  if (s.resolution == 0) return cc;
  int ch = s.role == Role::generator ? s.fc_channels : s.image_channels;
  for (const Stage& st : s.stages) {
    const int n = st.channels;
    for (const int m : {ch, n}) {
      cc.conv += size_t(9) * m * n;
      if (s.role == Role::generator) {
        const size_t e = size_t(m + s.d_z) * n + size_t(n) * n;
        cc.extra += e;
        if (s.kind == ConvKind::gconv) cc.conv += e;
      }
    }
    ch = n;
  }
  if (s.role == Role::generator) cc.conv += size_t(9) * ch * s.image_channels;
  return cc;
}

size_t toy_all_oracle(const ArchSpec& s) {
  size_t total = 0;
  int in = s.role == Role::generator ? s.d_z : s.data_dim;
  const bool gated = s.role == Role::generator && s.kind == ConvKind::gconv;
  for (size_t i = 0; i < s.toy_widths.size(); ++i) {
    const int w = s.toy_widths[i];
    const bool last = i + 1 == s.toy_widths.size();
    total += size_t(in) * w + w;
    if (gated && !last) total += size_t(in + s.d_z) * w + size_t(w) * w;
    in = w;
  }
  return total;
}

size_t param_numel(const Param* p) { return p->value.data->size(); }

}  // namespace

TEST_CASE("make_arch stage tables") {
  ArchSpec g32 = make_arch(32, Role::generator, ConvKind::gconv);
  CHECK(g32.kind == ConvKind::gconv);
  CHECK(g32.d_z == 32);
  CHECK(g32.fc_channels == 256);
  REQUIRE(g32.stages.size() == 3);
  for (const Stage& st : g32.stages) {
    CHECK(st.channels == 256);
    CHECK(st.resample);
  }

  ArchSpec g128 = make_arch(128, Role::generator, ConvKind::conv);
  CHECK(g128.fc_channels == 512);
  REQUIRE(g128.stages.size() == 5);
  const int g128_ch[] = {512, 512, 256, 128, 64};
  for (size_t i = 0; i < 5; ++i) {
    CHECK(g128.stages[i].channels == g128_ch[i]);
    CHECK(g128.stages[i].resample);
  }

  ArchSpec g256 = make_arch(256, Role::generator, ConvKind::conv);
  CHECK(g256.fc_channels == 512);
  REQUIRE(g256.stages.size() == 6);
  const int g256_ch[] = {512, 512, 256, 128, 64, 32};
  for (size_t i = 0; i < 6; ++i) {
    CHECK(g256.stages[i].channels == g256_ch[i]);
    CHECK(g256.stages[i].resample);
  }

  ArchSpec d32 = make_arch(32, Role::discriminator, ConvKind::conv);
  REQUIRE(d32.stages.size() == 4);
  for (const Stage& st : d32.stages) CHECK(st.channels == 128);
  CHECK(d32.stages[0].resample);
  CHECK(d32.stages[1].resample);
  CHECK_FALSE(d32.stages[2].resample);
  CHECK_FALSE(d32.stages[3].resample);

  ArchSpec d128 = make_arch(128, Role::discriminator, ConvKind::conv);
  REQUIRE(d128.stages.size() == 6);
  const int d128_ch[] = {64, 128, 256, 512, 512, 512};
  for (size_t i = 0; i < 6; ++i) {
    CHECK(d128.stages[i].channels == d128_ch[i]);
    CHECK(d128.stages[i].resample == (i < 5));
  }

  ArchSpec d256 = make_arch(256, Role::discriminator, ConvKind::conv);
  REQUIRE(d256.stages.size() == 7);
  const int d256_ch[] = {32, 64, 128, 256, 512, 512, 512};
  for (size_t i = 0; i < 7; ++i) {
    CHECK(d256.stages[i].channels == d256_ch[i]);
    CHECK(d256.stages[i].resample == (i < 6));
  }

  ArchSpec toy_g = make_arch(0, Role::generator, ConvKind::gconv);
  CHECK(toy_g.toy_widths == std::vector<int>{128, 128, 128, 2});
  ArchSpec toy_d = make_arch(0, Role::discriminator, ConvKind::conv);
  CHECK(toy_d.toy_widths == std::vector<int>{128, 128, 128, 1});

  CHECK_THROWS_AS(make_arch(64, Role::generator, ConvKind::conv), ValueError);
  CHECK_THROWS_AS(make_arch(-1, Role::discriminator, ConvKind::conv), ValueError);
}

TEST_CASE("spec validation rejects inconsistent plans") {
  ArchSpec s = make_arch(32, Role::generator, ConvKind::conv);
  s.stages.pop_back();  // stages now reach 16x16
  try {
    s.validate();
    FAIL("expected a validation error");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("16x16") != std::string::npos);
  }

  ArchSpec d = make_arch(32, Role::discriminator, ConvKind::conv);
  d.stages.assign(6, Stage{8, true});  // 32 / 2^6 < 1
  CHECK_THROWS_AS(d.validate(), ValueError);

  ArchSpec g = make_arch(32, Role::generator, ConvKind::conv);
  g.fc_channels = 0;
  CHECK_THROWS_AS(g.validate(), ValueError);
  g = make_arch(32, Role::generator, ConvKind::conv);
  g.d_z = 0;
  CHECK_THROWS_AS(g.validate(), ValueError);
  g = make_arch(32, Role::generator, ConvKind::conv);
  g.stages[1].channels = 0;
  CHECK_THROWS_AS(g.validate(), ValueError);
  g = make_arch(32, Role::generator, ConvKind::conv);
  g.resolution = 48;
  CHECK_THROWS_AS(g.validate(), ValueError);

  ArchSpec t = make_arch(0, Role::generator, ConvKind::conv);
  t.toy_widths[0] = 0;
  CHECK_THROWS_AS(t.validate(), ValueError);
  t = make_arch(0, Role::generator, ConvKind::conv);
  t.toy_widths.clear();
  CHECK_THROWS_AS(t.validate(), ValueError);

  // count_weights and shape_audit refuse the same plans
  ArchSpec bad = make_arch(32, Role::generator, ConvKind::conv);
  bad.stages.pop_back();
  CHECK_THROWS_AS(count_weights(bad, CountPolicy::conv_only), ValueError);
  CHECK_THROWS_AS(shape_audit(bad), ValueError);
}

TEST_CASE("toy shape audits") {
  for (ConvKind k : {ConvKind::conv, ConvKind::gconv}) {
    check_trace(shape_audit(make_arch(0, Role::generator, k)),
                {{"z", {2, 32}},
                 {"g.h1", {2, 128}},
                 {"g.h2", {2, 128}},
                 {"g.h3", {2, 128}},
                 {"g.out", {2, 2}}});
  }
  check_trace(shape_audit(make_arch(0, Role::discriminator, ConvKind::conv)),
              {{"x", {2, 2}},
               {"d.h1", {2, 128}},
               {"d.h2", {2, 128}},
               {"d.h3", {2, 128}},
               {"d.out", {2, 1}}});
}

TEST_CASE("32x32 generator shape audit, both kinds") {
  for (ConvKind k : {ConvKind::conv, ConvKind::gconv}) {
    const ArchSpec s = make_arch(32, Role::generator, k);
    const auto rows = shape_audit(s);
    check_trace(rows, gen_rows(s));
    // the key waypoints, pinned by hand
    REQUIRE(rows.size() == 7);
    CHECK(rows[1].shape == std::vector<int>{2, 4, 4, 256});
    CHECK(rows[2].shape == std::vector<int>{2, 8, 8, 256});
    CHECK(rows[3].shape == std::vector<int>{2, 16, 16, 256});
    CHECK(rows[4].shape == std::vector<int>{2, 32, 32, 256});
    CHECK(rows[6].shape == std::vector<int>{2, 32, 32, 3});
  }
}

TEST_CASE("32x32 discriminator shape audit") {
  const ArchSpec s = make_arch(32, Role::discriminator, ConvKind::conv);
  const auto rows = shape_audit(s);
  check_trace(rows, disc_rows(s));
  REQUIRE(rows.size() == 6);
  CHECK(rows[1].shape == std::vector<int>{2, 16, 16, 128});
  CHECK(rows[2].shape == std::vector<int>{2, 8, 8, 128});
  CHECK(rows[4].shape == std::vector<int>{2, 8, 8, 128});
  CHECK(rows[5].shape == std::vector<int>{2, 1});
}

TEST_CASE("128x128 shape audits") {
  const ArchSpec g = make_arch(128, Role::generator, ConvKind::gconv);
  const auto grows = shape_audit(g);
  check_trace(grows, gen_rows(g));
  CHECK(grows.back().shape == std::vector<int>{2, 128, 128, 3});
  CHECK(grows[6].shape == std::vector<int>{2, 128, 128, 64});

  const ArchSpec d = make_arch(128, Role::discriminator, ConvKind::conv);
  const auto drows = shape_audit(d);
  check_trace(drows, disc_rows(d));
  CHECK(drows[5].shape == std::vector<int>{2, 4, 4, 512});
  CHECK(drows.back().shape == std::vector<int>{2, 1});
}

TEST_CASE("256x256 shape audits") {
  const ArchSpec g = make_arch(256, Role::generator, ConvKind::gconv);
  const auto grows = shape_audit(g);
  check_trace(grows, gen_rows(g));
  CHECK(grows[7].shape == std::vector<int>{2, 256, 256, 32});
  CHECK(grows.back().shape == std::vector<int>{2, 256, 256, 3});

  const ArchSpec d = make_arch(256, Role::discriminator, ConvKind::conv);
  const auto drows = shape_audit(d);
  check_trace(drows, disc_rows(d));
  CHECK(drows[7].shape == std::vector<int>{2, 4, 4, 512});
  CHECK(drows.back().shape == std::vector<int>{2, 1});
}

TEST_CASE("32x32 generator conv weights, pinned") {
  const ParamReport plain =
      count_weights(make_arch(32, Role::generator, ConvKind::conv), CountPolicy::conv_only);
  CHECK(plain.conv_weights == 3'545'856);
  CHECK(plain.gconv_extra == 835'584);
  // seven counted tensors: two 3x3 kernels per block plus the output conv
  REQUIRE(plain.layers.size() == 7);
  CHECK(plain.layers[0].name == "g.rb1.c1.K");
  CHECK(plain.layers[0].count == 589'824);
  CHECK(plain.layers[6].name == "g.conv_out.K");
  CHECK(plain.layers[6].count == 6'912);

  const ParamReport gated =
      count_weights(make_arch(32, Role::generator, ConvKind::gconv), CountPolicy::conv_only);
  CHECK(gated.conv_weights == 4'381'440);
  CHECK(gated.gconv_extra == 835'584);
  CHECK(gated.conv_weights == plain.conv_weights + plain.gconv_extra);
  REQUIRE(gated.layers.size() == 19);
  CHECK(gated.layers[1].name == "g.rb1.c1.Ws");
  CHECK(gated.layers[1].shape == std::vector<int>{288, 256});
  CHECK(gated.layers[2].name == "g.rb1.c1.WL");
  CHECK(gated.layers[2].shape == std::vector<int>{256, 256});
}

TEST_CASE("conv weight counts match a direct recount at every resolution") {
  for (int res : {32, 128, 256}) {
    for (Role role : {Role::generator, Role::discriminator}) {
      for (ConvKind k : {ConvKind::conv, ConvKind::gconv}) {
        const ArchSpec s = make_arch(res, role, k);
        const ParamReport r = count_weights(s, CountPolicy::conv_only);
        const ConvCounts want = conv_count_oracle(s);
        CHECK(r.conv_weights == want.conv);
        CHECK(r.gconv_extra == want.extra);
        CHECK(r.total_weights == r.conv_weights);
        size_t sum = 0;
        for (const LayerCount& l : r.layers) {
          CHECK(l.count == numel(l.shape));
          sum += l.count;
        }
        CHECK(sum == r.total_weights);
      }
    }
  }
}

TEST_CASE("gconv generators cost exactly the baseline plus the reported extra") {
  for (int res : {32, 128, 256}) {
    const ParamReport plain =
        count_weights(make_arch(res, Role::generator, ConvKind::conv), CountPolicy::conv_only);
    const ParamReport gated =
        count_weights(make_arch(res, Role::generator, ConvKind::gconv), CountPolicy::conv_only);
    CHECK(gated.gconv_extra == plain.gconv_extra);
    CHECK(gated.conv_weights == plain.conv_weights + plain.gconv_extra);

    // discriminators never carry the gate
    const ParamReport d =
        count_weights(make_arch(res, Role::discriminator, ConvKind::gconv), CountPolicy::conv_only);
    CHECK(d.gconv_extra == 0);
    CHECK(d.conv_weights ==
          count_weights(make_arch(res, Role::discriminator, ConvKind::conv), CountPolicy::conv_only)
              .conv_weights);
  }
}

TEST_CASE("toy nets have no counted convolutions") {
  const ParamReport r =
      count_weights(make_arch(0, Role::generator, ConvKind::gconv), CountPolicy::conv_only);
  CHECK(r.conv_weights == 0);
  CHECK(r.gconv_extra == 0);
  CHECK(r.layers.empty());
}

TEST_CASE("full counts enumerate the real parameter set") {
  for (ConvKind k : {ConvKind::conv, ConvKind::gconv}) {
    const ArchSpec s = make_arch(0, Role::generator, k);
    const ParamReport r = count_weights(s, CountPolicy::all);
    CHECK(r.total_weights == toy_all_oracle(s));
    ToyGenerator g(s, nullptr);
    std::vector<Param*> ps;
    g.collect_params(ps);
    REQUIRE(r.layers.size() == ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
      CHECK(r.layers[i].name == ps[i]->name);
      CHECK(r.layers[i].count == param_numel(ps[i]));
    }
  }

  const ArchSpec td = make_arch(0, Role::discriminator, ConvKind::conv);
  CHECK(count_weights(td, CountPolicy::all).total_weights == toy_all_oracle(td));
}

TEST_CASE("counted convs agree with a materialized generator") {
  for (ConvKind k : {ConvKind::conv, ConvKind::gconv}) {
    const ArchSpec s = make_arch(32, Role::generator, k);
    ImageGenerator g(s, nullptr);
    std::vector<Param*> ps;
    g.collect_params(ps);

    size_t conv_sum = 0, total = 0;
    for (const Param* p : ps) {
      const std::string& nm = p->name;
      total += param_numel(p);
      const bool block_conv = nm.find(".c1.") != std::string::npos ||
                              nm.find(".c2.") != std::string::npos;
      const bool counted = (block_conv && (nm.ends_with(".K") || nm.ends_with(".Ws") ||
                                           nm.ends_with(".WL"))) ||
                           nm == "g.conv_out.K";
      if (counted) conv_sum += param_numel(p);
    }
    const ParamReport conv_only = count_weights(s, CountPolicy::conv_only);
    CHECK(conv_sum == conv_only.conv_weights);

    const ParamReport all = count_weights(s, CountPolicy::all);
    CHECK(all.total_weights == total);
    REQUIRE(all.layers.size() == ps.size());
    for (size_t i = 0; i < ps.size(); ++i) CHECK(all.layers[i].name == ps[i]->name);
  }
}

TEST_CASE("parameter report serialization") {
  const ParamReport r =
      count_weights(make_arch(32, Role::generator, ConvKind::gconv), CountPolicy::conv_only);
  const auto j = nlohmann::json::parse(param_report_json(r));
  REQUIRE(j.is_object());
  CHECK(j.size() == 5);
  CHECK(j.contains("resolution"));
  CHECK(j.contains("conv_kind"));
  CHECK(j.contains("conv_weights"));
  CHECK(j.contains("gconv_extra"));
  CHECK(j.contains("layers"));
  CHECK(j["resolution"] == 32);
  CHECK(j["conv_kind"] == "gconv");
  CHECK(j["conv_weights"] == 4'381'440);
  CHECK(j["gconv_extra"] == 835'584);
  REQUIRE(j["layers"].is_array());
  REQUIRE(j["layers"].size() == 19);
  const auto& first = j["layers"][0];
  CHECK(first.size() == 3);
  CHECK(first["name"] == "g.rb1.c1.K");
  CHECK(first["shape"] == std::vector<int>{3, 3, 256, 256});
  CHECK(first["count"] == 589'824);

  const auto jc = nlohmann::json::parse(param_report_json(
      count_weights(make_arch(32, Role::generator, ConvKind::conv), CountPolicy::conv_only)));
  CHECK(jc["conv_kind"] == "conv");
  CHECK(jc["conv_weights"] == 3'545'856);
}

TEST_CASE("toy pair is built deterministically from its seed") {
  ToyGan a(ConvKind::gconv, 32, 7);
  ToyGan b(ConvKind::gconv, 32, 7);
  ToyGan c(ConvKind::gconv, 32, 8);

  auto pa = a.all_params(), pb = b.all_params(), pc = c.all_params();
  REQUIRE(pa.size() == pb.size());
  REQUIRE(pa.size() == pc.size());
  CHECK(pa.size() == a.gen_params().size() + a.dis_params().size());

  bool any_diff_seed = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    const auto& da = *pa[i]->value.data;
    const auto& db = *pb[i]->value.data;
    REQUIRE(da.size() == db.size());
    CHECK(std::memcmp(da.data(), db.data(), da.size() * sizeof(double)) == 0);
    if (std::memcmp(da.data(), pc[i]->value.data->data(), da.size() * sizeof(double)) != 0)
      any_diff_seed = true;
  }
  CHECK(any_diff_seed);

  // generator parameters first, discriminator after
  const size_t ng = a.gen_params().size();
  for (size_t i = 0; i < pa.size(); ++i)
    CHECK(pa[i]->name.rfind(i < ng ? "g." : "d.", 0) == 0);
}

TEST_CASE("toy forwards produce scores of the right shape") {
  Rng rng(21);
  Tensor z({3, 32});
  rng.fill_normal(z.data->data(), z.data->size());
  for (ConvKind k : {ConvKind::conv, ConvKind::gconv}) {
    ToyGan gan(k, 32, 4);
    Tensor x = gan.gen.forward(nullptr, z);
    REQUIRE(x.shape == std::vector<int>{3, 2});
    Tensor y = gan.dis.forward(nullptr, x);
    REQUIRE(y.shape == std::vector<int>{3, 1});
    for (double v : *y.data) CHECK(std::isfinite(v));
  }
}

TEST_CASE("32x32 generator emits images in tanh range") {
  Rng rng(11);
  ImageGenerator g(make_arch(32, Role::generator, ConvKind::conv), &rng);
  Tensor z({2, 32});
  rng.fill_normal(z.data->data(), z.data->size());
  Tensor out = g.forward(nullptr, z, /*train=*/true);
  REQUIRE(out.shape == std::vector<int>{2, 32, 32, 3});
  double lo = 1e300, hi = -1e300;
  for (double v : *out.data) {
    REQUIRE(std::isfinite(v));
    CHECK(std::abs(v) <= 1.0);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(hi - lo > 0.0);  // orthogonal weights leave the net far from constant
}

TEST_CASE("32x32 discriminator scores a batch") {
  Rng rng(13);
  ImageDiscriminator d(make_arch(32, Role::discriminator, ConvKind::conv), &rng);
  Tensor x({2, 32, 32, 3});
  for (double& v : *x.data) v = rng.uniform(-1.0, 1.0);
  Tensor y = d.forward(nullptr, x, /*update_estimate=*/true);
  REQUIRE(y.shape == std::vector<int>{2, 1});
  for (double v : *y.data) CHECK(std::isfinite(v));
}

TEST_CASE("forward errors name the stage that failed") {
  ImageGenerator g(make_arch(32, Role::generator, ConvKind::conv), nullptr);
  try {
    g.forward(nullptr, Tensor({2, 16}), false);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).rfind("g.fc:", 0) == 0);
  }

  ToyGan gan(ConvKind::conv, 32, 1);
  try {
    gan.gen.forward(nullptr, Tensor({2, 7}));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).rfind("g.h1:", 0) == 0);
  }

  CHECK_THROWS_AS(ToyGenerator(make_arch(32, Role::generator, ConvKind::conv), nullptr),
                  ValueError);
  CHECK_THROWS_AS(ImageGenerator(make_arch(0, Role::generator, ConvKind::conv), nullptr),
                  ValueError);
  CHECK_THROWS_AS(ImageDiscriminator(make_arch(32, Role::generator, ConvKind::conv), nullptr),
                  ValueError);
}
