#include "doctest.h"

#include "dynident/errors.hpp"
#include "dynident/multiview.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace dynident;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// dx/dt = theta on R^2 from the origin, so x(t) = theta t.
OdeSystem drift_system() {
  OdeSystem s;
  s.id = "drift2";
  s.name = "constant drift";
  s.state_dim = 2;
  s.param_dim = 2;
  s.field = [](std::span<const double> th, std::span<const double>, std::span<double> dx) {
    dx[0] = th[0];
    dx[1] = th[1];
  };
  s.param_box = {{0.5, 2.0}, {-1.0, 1.0}};
  s.canonical_theta = Vec::Constant(2, 1.0);
  s.x0 = Vec::Zero(2);
  s.t_max = 1.0;
  s.grid_points = 21;
  return s;
}

IdentifierConfig small_config() {
  IdentifierConfig c;
  c.latent_dim = 4;
  c.hidden_dim = 16;
  c.depth = 2;
  c.n_init = 5;
  return c;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("PartitionLayout") {
  const auto p = PartitionLayout::contiguous(12, 3, 1);
  CHECK(p.blocks.size() == 3);
  CHECK(p.blocks[2] == std::vector<int>{8, 9, 10, 11});
  CHECK(p.shared() == std::vector<int>{4, 5, 6, 7});
  CHECK(PartitionLayout::contiguous(5, 2).blocks[0].size() == 3);
  CHECK_THROWS_AS(PartitionLayout::contiguous(2, 3), InvalidArgument);
  CHECK_THROWS_AS(PartitionLayout::contiguous(4, 2, 2), InvalidArgument);
  PartitionLayout bad = p;
  bad.blocks[0].push_back(4);
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = p;
  bad.blocks[2].pop_back();
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("generate_multiview_dataset") {
  const auto& lv = find_system("ode27");
  SUBCASE("shared components agree exactly, the rest are independent") {
    const auto ds = generate_multiview_dataset(lv, {0, 1}, 500, 4);
    REQUIRE(ds.pairs.size() == 500);
    std::vector<double> a2, b2, a3, b3;
    for (const auto& p : ds.pairs) {
      const Vec& a = *p.views[0].theta_truth;
      const Vec& b = *p.views[1].theta_truth;
      CHECK(a[0] == b[0]);
      CHECK(a[1] == b[1]);
      CHECK(lv.in_box(a));
      CHECK(lv.in_box(b));
      a2.push_back(a[2]), b2.push_back(b[2]), a3.push_back(a[3]), b3.push_back(b[3]);
      CHECK(p.views[0].states.row(0) == lv.x0.transpose());
    }
    CHECK(std::abs(correlation(a2, b2)) <= 0.1);
    CHECK(std::abs(correlation(a3, b3)) <= 0.1);
  }
  SUBCASE("degenerate shared sets") {
    CHECK_THROWS_AS(generate_multiview_dataset(lv, {}, 5, 1), InvalidArgument);
    CHECK_THROWS_AS(generate_multiview_dataset(lv, {0, 1, 2, 3}, 5, 1), InvalidArgument);
    CHECK_THROWS_AS(generate_multiview_dataset(lv, {4}, 5, 1), InvalidArgument);
    CHECK_THROWS_AS(generate_multiview_dataset(lv, {1, 1}, 5, 1), InvalidArgument);
  }
  SUBCASE("same seed, same bytes; thread count does not matter") {
    const auto dir = std::filesystem::temp_directory_path() / "dynident_mv_test";
    std::filesystem::create_directories(dir);
    MultiviewSynthOptions opt;
    write_multiview_jsonl(dir / "a.jsonl", generate_multiview_dataset(lv, {0, 1}, 20, 9, opt));
    opt.threads = 3;
    write_multiview_jsonl(dir / "b.jsonl", generate_multiview_dataset(lv, {0, 1}, 20, 9, opt));
    write_multiview_jsonl(dir / "c.jsonl", generate_multiview_dataset(lv, {0, 1}, 20, 10, opt));
    CHECK(slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl"));
    CHECK(slurp(dir / "a.jsonl") != slurp(dir / "c.jsonl"));

    const auto back = read_multiview_jsonl(dir / "a.jsonl");
    const auto orig = generate_multiview_dataset(lv, {0, 1}, 20, 9);
    REQUIRE(back.pairs.size() == 20);
    CHECK(back.system_id == "ode27");
    CHECK(back.pairs[7].views[1].states == orig.pairs[7].views[1].states);
    CHECK(*back.pairs[7].views[1].theta_truth == *orig.pairs[7].views[1].theta_truth);
    std::filesystem::remove_all(dir);
  }
  SUBCASE("triples declare a second link") {
    MultiviewSynthOptions opt;
    opt.n_views = 3;
    opt.third_view_shared = {2, 3};
    const auto ds = generate_multiview_dataset(lv, {0, 1}, 30, 2, opt);
    for (const auto& p : ds.pairs) {
      REQUIRE(p.views.size() == 3);
      REQUIRE(p.links.size() == 2);
      CHECK(p.links[1].block == 1);
      CHECK(p.views[0].theta_truth->tail(2) == p.views[2].theta_truth->tail(2));
      CHECK_NOTHROW(validate_pair(p));
    }
  }
  SUBCASE("initial-condition jitter") {
    MultiviewSynthOptions opt;
    opt.ic_jitter = 0.01;
    const auto ds = generate_multiview_dataset(lv, {0, 1}, 3, 2, opt);
    CHECK(ds.pairs[0].views[0].states.row(0) != lv.x0.transpose());
  }
}

TEST_CASE("validate_pair") {
  const auto& lv = find_system("ode27");
  auto p = generate_multiview_dataset(lv, {0, 1}, 1, 3).pairs[0];
  CHECK_NOTHROW(validate_pair(p));
  auto bad = p;
  (*bad.views[1].theta_truth)[0] += 1e-12;
  CHECK_THROWS_AS(validate_pair(bad), InvalidArgument);
  bad = p;
  bad.views[1].theta_truth = bad.views[0].theta_truth;
  CHECK_THROWS_AS(validate_pair(bad), InvalidArgument);
  bad = p;
  bad.views.pop_back();
  CHECK_THROWS_AS(validate_pair(bad), InvalidArgument);
  bad = p;
  bad.links[0].view_b = 5;
  CHECK_THROWS_AS(validate_pair(bad), InvalidArgument);
  auto j = pair_to_json(p);
  j["format"] = "other";
  CHECK_THROWS_AS(pair_from_json(j), InvalidArgument);
}

TEST_CASE("multiview_loss") {
  const auto& lv = find_system("ode27");
  const auto ds = generate_multiview_dataset(lv, {0, 1}, 8, 5);
  const auto model = init_identifier(ds, small_config(), 1);

  SUBCASE("identical views have zero alignment") {
    auto p = ds.pairs[0];
    p.views[1] = p.views[0];
    CHECK(multiview_loss(model, p, 10.0).alignment == 0.0);
  }
  SUBCASE("random model: finite, positive, decomposes exactly") {
    std::vector<const MultiviewPair*> batch;
    for (const auto& p : ds.pairs) batch.push_back(&p);
    for (double reg : {0.0, 1.0, 10.0}) {
      const auto l = multiview_loss(model, batch, reg);
      const double total = l.total.item();
      CHECK(std::isfinite(total));
      CHECK(total > 0.0);
      CHECK(total == doctest::Approx(reg * l.alignment + l.sufficiency).epsilon(1e-14));
    }
  }
  SUBCASE("batch loss is the mean of per-pair losses") {
    const auto a = multiview_loss(model, ds.pairs[0], 10.0);
    const auto b = multiview_loss(model, ds.pairs[1], 10.0);
    const auto ab = multiview_loss(model, {&ds.pairs[0], &ds.pairs[1]}, 10.0);
    CHECK(ab.total.item() == doctest::Approx(0.5 * (a.total.item() + b.total.item())).epsilon(1e-13));
  }
  SUBCASE("gradients pass the finite-difference check") {
    for (auto kind : {DecoderKind::mlp, DecoderKind::vector_field}) {
      auto cfg = small_config();
      cfg.decoder = kind;
      const auto m = init_identifier(ds, cfg, 2);
      const std::vector<const MultiviewPair*> batch{&ds.pairs[0], &ds.pairs[1], &ds.pairs[2]};
      nn::GradientCheckOptions opt;
      opt.max_coordinates = 60;
      CHECK(nn::gradient_check([&] { return multiview_loss(m, batch, 10.0).total; }, m.parameters(), opt) <= 1e-4);
    }
  }
  SUBCASE("shape mismatch") {
    auto p = ds.pairs[0];
    p.views[0].states.conservativeResize(50, 2);
    CHECK_THROWS_AS(multiview_loss(model, p, 1.0), InvalidArgument);
  }
}

TEST_CASE("a ground-truth inverse and generator reach zero loss") {
  const OdeSystem sys = drift_system();
  const auto ds = generate_multiview_dataset(sys, {0}, 16, 3);
  IdentifierConfig cfg;
  cfg.latent_dim = 2;
  cfg.n_blocks = 2;
  cfg.depth = 1;
  cfg.n_init = 3;
  IdentifierModel m = init_identifier(ds, cfg, 0);
  const auto& prep = m.prep;
  const int T = prep.length, d = prep.state_dim;
  const Mat basis = dct_basis(T, prep.keep_count());
  const auto& grid = ds.pairs[0].views[0].grid;
  double dc_one = 0.0, dc_t = 0.0;
  for (int t = 0; t < T; ++t) dc_one += basis(t, 0), dc_t += basis(t, 0) * grid[t];

  // encoder: theta_c from the DC coefficient of channel c
  auto& enc = m.encoder.layers[0];
  enc.weight.data().setZero();
  for (int c = 0; c < d; ++c) {
    enc.weight.data()(c, c) = prep.scale[c] / dc_t;
    enc.bias.data()(0, c) = prep.mean[c] * dc_one / dc_t;
  }
  // decoder: standardized theta_c t
  auto& dec = m.decoder.layers[0];
  dec.weight.data().setZero();
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < d; ++c) {
      dec.weight.data()(c, t * d + c) = grid[t] / prep.scale[c];
      dec.bias.data()(0, t * d + c) = -prep.mean[c] / prep.scale[c];
    }

  std::vector<const MultiviewPair*> batch;
  for (const auto& p : ds.pairs) batch.push_back(&p);
  const auto loss = multiview_loss(m, batch, 10.0);
  CHECK(loss.alignment == 0.0);
  CHECK(loss.total.item() <= 1e-18);
  const Vec z = encode(m, ds.pairs[3].views[1]);
  CHECK((z - *ds.pairs[3].views[1].theta_truth).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("train_identifier") {
  const auto& lv = find_system("ode27");
  const auto ds = generate_multiview_dataset(lv, {0, 1}, 64, 6);
  TrainConfig cfg;
  cfg.model = small_config();
  cfg.batch = 16;
  cfg.seed = 3;

  SUBCASE("zero epochs returns the initialization") {
    cfg.epochs = 0;
    const auto r = train_identifier(ds, cfg);
    const auto init = init_identifier(ds, cfg.model, cfg.seed);
    CHECK(r.curve.empty());
    CHECK(r.model.encoder.layers[1].weight.value() == init.encoder.layers[1].weight.value());
    CHECK(r.model.decoder.layers[0].weight.value() == init.decoder.layers[0].weight.value());
  }
  SUBCASE("deterministic, with a decreasing smoothed loss") {
    cfg.epochs = 40;
    const auto a = train_identifier(ds, cfg);
    const auto b = train_identifier(ds, cfg);
    REQUIRE(a.curve.size() == 40);
    for (std::size_t e = 0; e < a.curve.size(); ++e) CHECK(a.curve[e].total == b.curve[e].total);
    CHECK(a.model.encoder.layers[0].weight.value() == b.model.encoder.layers[0].weight.value());
    std::vector<double> smooth;
    for (std::size_t e = 9; e < a.curve.size(); ++e) {
      double s = 0.0;
      for (std::size_t k = e - 9; k <= e; ++k) s += a.curve[k].total / 10.0;
      smooth.push_back(s);
    }
    for (std::size_t k = 1; k < smooth.size(); ++k) CHECK(smooth[k] <= smooth[k - 1]);
    for (const auto& e : a.curve) CHECK(e.total == doctest::Approx(cfg.reg_align * e.alignment + e.sufficiency));
  }
  SUBCASE("without the alignment weight the shared block is not aligned") {
    cfg.epochs = 30;
    const auto aligned = train_identifier(ds, cfg);
    cfg.reg_align = 0.0;
    const auto free = train_identifier(ds, cfg);
    CHECK(free.curve.back().alignment > 3.0 * aligned.curve.back().alignment);
    CHECK(free.curve.back().sufficiency < free.curve.front().sufficiency);
  }
  SUBCASE("non-finite loss aborts with diagnostics") {
    cfg.epochs = 2;
    cfg.reg_align = std::numeric_limits<double>::infinity();
    try {
      train_identifier(ds, cfg);
      FAIL("expected TrainingDiverged");
    } catch (const TrainingDiverged& e) {
      const std::string msg = e.what();
      CHECK(msg.find("epoch 0") != std::string::npos);
      CHECK(msg.find("batch 0") != std::string::npos);
      CHECK(msg.find("alignment=") != std::string::npos);
    }
  }
  SUBCASE("invalid settings") {
    cfg.batch = 0;
    CHECK_THROWS_AS(train_identifier(ds, cfg), InvalidArgument);
    cfg.batch = 4;
    CHECK_THROWS_AS(train_identifier(MultiviewDataset{}, cfg), InvalidArgument);
  }
}

TEST_CASE("inference helpers") {
  const auto& lv = find_system("ode27");
  const auto ds = generate_multiview_dataset(lv, {0, 1}, 128, 8);
  const auto held = generate_multiview_dataset(lv, {0, 1}, 32, 80);
  TrainConfig cfg;
  cfg.model = small_config();
  cfg.model.hidden_dim = 32;
  cfg.epochs = 60;
  cfg.batch = 32;
  const auto r = train_identifier(ds, cfg);
  const auto& m = r.model;
  const auto& traj = held.pairs[0].views[0];

  CHECK(encode(m, traj) == encode(m, traj));
  const Mat pred = decode_forecast(m, encode(m, traj), traj.states.topRows(m.prep.n_init));
  CHECK(pred.rows() == traj.length());
  CHECK(pred.cols() == traj.dim());
  CHECK_THROWS_AS(decode_forecast(m, Vec::Zero(3), traj.states.topRows(m.prep.n_init)), InvalidArgument);
  CHECK_THROWS_AS(decode_forecast(m, encode(m, traj), traj.states.topRows(4)), InvalidArgument);

  const double fe = forecast_error(m, traj);
  CHECK(std::isfinite(fe));
  CHECK(fe >= 0.0);

  // held-out reconstruction stays at the level reached in training
  double held_suff = 0.0;
  for (const auto& p : held.pairs)
    held_suff += reconstruction_error(m, p.views[0]) + reconstruction_error(m, p.views[1]);
  held_suff /= static_cast<double>(held.pairs.size());
  CHECK(held_suff <= 1.5 * r.curve.back().sufficiency);
  CHECK(held_suff < r.curve.front().sufficiency);

  SUBCASE("checkpoint round trip") {
    const auto back = identifier_from_json(nlohmann::json::parse(identifier_to_json(m).dump()));
    CHECK(encode(back, traj) == encode(m, traj));
    auto j = identifier_to_json(m);
    j["preprocessing"]["length"] = 50;
    CHECK_THROWS_AS(identifier_from_json(j), InvalidArgument);
    j = identifier_to_json(m);
    j["decoder_kind"] = "spline";
    CHECK_THROWS_AS(identifier_from_json(j), InvalidArgument);
  }
  SUBCASE("alignment ratios") {
    const auto ratios = alignment_ratios(m, held);
    REQUIRE(ratios.size() == 1);
    CHECK(ratios[0] >= 0.0);
    CHECK(std::isfinite(ratios[0]));
  }
}
