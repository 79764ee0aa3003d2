#include <doctest.h>

#include <random>

#include "more/action_codec.hpp"

using namespace more;

TEST_CASE("binning formula") {
  BinSpec::Dim d{-1.0, 1.0, 4, 0};
  CHECK(bin_index(-1.0, d) == 0);
  CHECK(bin_index(1.0, d) == 3); // hi clamps into the last bin
  CHECK(bin_index(0.1, d) == 2); // floor((1.1/2)*4) = 2
  CHECK(bin_center(2, d) == doctest::Approx(0.25));
}

TEST_CASE("discretize boundary behavior") {
  BinSpec bins = BinSpec::default_spec(10);
  CommandVector cmd;
  cmd.v_x = bins.dims[0].lo;
  cmd.f = 2.0;
  cmd.h_z = 0.2;
  cmd.s_y = 0.2;
  ActionTokens t = discretize(cmd, bins);
  CHECK(t.tokens[0] == bins.block_start(0));
  cmd.v_x = bins.dims[0].hi;
  t = discretize(cmd, bins);
  CHECK(t.tokens[0] == bins.block_start(0) + bins.dims[0].n_bins - 1);
}

TEST_CASE("out-of-range command rejected") {
  BinSpec bins = BinSpec::default_spec(0);
  CommandVector cmd;
  cmd.f = 2.0;
  cmd.h_z = 0.2;
  cmd.s_y = 0.2;
  cmd.v_x = 2.0;
  CHECK_THROWS_AS(discretize(cmd, bins), OutOfRange);
}

TEST_CASE("binary flag round trip") {
  BinSpec bins = BinSpec::default_spec(5);
  CommandVector cmd;
  cmd.f = 2.0;
  cmd.h_z = 0.2;
  cmd.s_y = 0.2;
  cmd.T = 1.0;
  ActionTokens t = discretize(cmd, bins);
  CommandVector back = detokenize(t, bins);
  CHECK(back.T == 1.0);
  cmd.T = 0.0;
  CHECK(detokenize(discretize(cmd, bins), bins).T == 0.0);
}

TEST_CASE("invalid token rejected") {
  BinSpec bins = BinSpec::toy_spec(4, 2, 3);
  ActionTokens t;
  t.tokens = {2, bins.block_start(1)}; // token 2 is in the reserved region
  CHECK_THROWS_AS(detokenize(t, bins), InvalidToken);
}

TEST_CASE("mask block structure") {
  BinSpec bins = BinSpec::toy_spec(6, 2, 4); // 4-bin dim plus the binary flag
  auto mask = valid_token_mask(0, 14, bins);
  int count = 0;
  for (bool b : mask) count += b ? 1 : 0;
  CHECK(count == 4);
  CHECK(static_cast<int>(mask.size()) == 14);
  auto flag_mask = valid_token_mask(1, bins);
  int flag_count = 0;
  for (bool b : flag_mask) flag_count += b ? 1 : 0;
  CHECK(flag_count == 2);
}

TEST_CASE("masks partition the action vocabulary") {
  BinSpec bins = BinSpec::default_spec(45);
  int total = 0;
  std::vector<bool> seen(static_cast<size_t>(bins.vocab_size()), false);
  for (int d = 0; d < bins.action_dims(); ++d) {
    auto mask = valid_token_mask(d, bins);
    for (size_t t = 0; t < mask.size(); ++t) {
      if (!mask[t]) continue;
      CHECK(!seen[t]); // disjoint blocks
      seen[t] = true;
      ++total;
    }
  }
  CHECK(total == bins.action_vocab());
  for (int t = 0; t < bins.reserved_tokens; ++t) CHECK(!seen[static_cast<size_t>(t)]);
}

TEST_CASE("token round trip over random sequences") {
  BinSpec bins = BinSpec::default_spec(45);
  std::mt19937_64 rng(7);
  for (int iter = 0; iter < 2000; ++iter) {
    ActionTokens t;
    for (int d = 0; d < bins.action_dims(); ++d)
      t.tokens.push_back(bins.block_start(d) +
                         static_cast<int>(rng() % static_cast<uint64_t>(bins.dims[d].n_bins)));
    ActionTokens back = discretize(detokenize(t, bins), bins);
    CHECK(back.tokens == t.tokens);
  }
}

TEST_CASE("quantization error bound") {
  BinSpec bins = BinSpec::default_spec(0);
  std::mt19937_64 rng(11);
  auto unif = [&](double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
  };
  for (int iter = 0; iter < 2000; ++iter) {
    CommandVector cmd;
    for (int d = 0; d + 1 < bins.action_dims(); ++d)
      cmd.set_field(bins.dims[d].field, unif(bins.dims[d].lo, bins.dims[d].hi));
    cmd.T = (rng() & 1) ? 1.0 : 0.0;
    CommandVector back = detokenize(discretize(cmd, bins), bins);
    for (int d = 0; d < bins.action_dims(); ++d) {
      const auto& dim = bins.dims[d];
      double bound = (dim.hi - dim.lo) / (2.0 * dim.n_bins) + 1e-12;
      CHECK(std::abs(back.field(dim.field) - cmd.field(dim.field)) <= bound);
    }
  }
}
