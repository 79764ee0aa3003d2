#include "more/action_codec.hpp"

namespace more {

double CommandVector::field(int i) const {
  switch (i) {
    case 0: return v_x;
    case 1: return v_y;
    case 2: return omega_z;
    case 3: return theta_1;
    case 4: return theta_2;
    case 5: return theta_3;
    case 6: return f;
    case 7: return h_z;
    case 8: return phi;
    case 9: return s_y;
    case 10: return h_z_f;
    case 11: return T;
    default: throw std::out_of_range("CommandVector field index");
  }
}

void CommandVector::set_field(int i, double v) {
  switch (i) {
    case 0: v_x = v; break;
    case 1: v_y = v; break;
    case 2: omega_z = v; break;
    case 3: theta_1 = v; break;
    case 4: theta_2 = v; break;
    case 5: theta_3 = v; break;
    case 6: f = v; break;
    case 7: h_z = v; break;
    case 8: phi = v; break;
    case 9: s_y = v; break;
    case 10: h_z_f = v; break;
    case 11: T = v; break;
    default: throw std::out_of_range("CommandVector field index");
  }
}

const char* CommandVector::field_name(int i) {
  static const char* names[] = {"v_x", "v_y", "omega_z", "theta_1", "theta_2",
                                "theta_3", "f", "h_z", "phi", "s_y", "h_z_f", "T"};
  if (i < 0 || i >= kNumFields) return "?";
  return names[i];
}

int BinSpec::action_vocab() const {
  int total = 0;
  for (const auto& d : dims) total += d.n_bins;
  return total;
}

int BinSpec::block_start(int d) const {
  int start = reserved_tokens;
  for (int i = 0; i < d; ++i) start += dims[i].n_bins;
  return start;
}

void BinSpec::validate() const {
  if (dims.empty()) throw std::invalid_argument("BinSpec: no dimensions");
  if (reserved_tokens < 0) throw std::invalid_argument("BinSpec: negative reserved region");
  for (const auto& d : dims) {
    if (!(d.lo < d.hi)) throw std::invalid_argument("BinSpec: lo must be < hi");
    if (d.n_bins < 2) throw std::invalid_argument("BinSpec: n_bins must be >= 2");
  }
}

BinSpec BinSpec::default_spec(int reserved_tokens) {
  BinSpec spec;
  spec.reserved_tokens = reserved_tokens;
  // Ranges follow the quadruped command conventions; 21 bins give an exact
  // zero-center bin for symmetric fields.
  spec.dims = {
      {-1.0, 1.0, 21, 0},   // v_x
      {-0.6, 0.6, 21, 1},   // v_y
      {-1.0, 1.0, 21, 2},   // omega_z
      {0.0, 1.0, 21, 3},    // theta_1
      {0.0, 1.0, 21, 4},    // theta_2
      {0.0, 1.0, 21, 5},    // theta_3
      {1.0, 4.0, 21, 6},    // f
      {0.10, 0.40, 21, 7},  // h_z
      {-0.4, 0.4, 21, 8},   // phi
      {0.05, 0.45, 21, 9},  // s_y
      {0.0, 0.20, 21, 10},  // h_z_f
      {0.0, 1.0, 2, 11},    // T
  };
  return spec;
}

BinSpec BinSpec::toy_spec(int reserved_tokens, int n_dims, int n_bins,
                          double lo, double hi) {
  BinSpec spec;
  spec.reserved_tokens = reserved_tokens;
  for (int i = 0; i + 1 < n_dims; ++i) spec.dims.push_back({lo, hi, n_bins, i});
  spec.dims.push_back({0.0, 1.0, 2, CommandVector::kNumFields - 1});
  return spec;
}

int bin_index(double value, const BinSpec::Dim& dim) {
  double u = (value - dim.lo) / (dim.hi - dim.lo);
  int b = static_cast<int>(std::floor(u * dim.n_bins));
  if (b >= dim.n_bins) b = dim.n_bins - 1; // hi falls into the last bin
  if (b < 0) b = 0;
  return b;
}

double bin_center(int b, const BinSpec::Dim& dim) {
  // Binary flags dequantize to the exact endpoint values.
  if (dim.n_bins == 2 && dim.lo == 0.0 && dim.hi == 1.0) return static_cast<double>(b);
  double width = (dim.hi - dim.lo) / dim.n_bins;
  return dim.lo + (b + 0.5) * width;
}

ActionTokens discretize(const CommandVector& cmd, const BinSpec& bins) {
  bins.validate();
  ActionTokens out;
  out.tokens.reserve(bins.dims.size());
  int start = bins.reserved_tokens;
  for (int d = 0; d < bins.action_dims(); ++d) {
    const auto& dim = bins.dims[d];
    double v = cmd.field(dim.field);
    if (v < dim.lo || v > dim.hi) throw OutOfRange(d, v);
    out.tokens.push_back(start + bin_index(v, dim));
    start += dim.n_bins;
  }
  return out;
}

CommandVector detokenize(const ActionTokens& tokens, const BinSpec& bins) {
  bins.validate();
  if (static_cast<int>(tokens.tokens.size()) != bins.action_dims())
    throw std::invalid_argument("token count does not match action dimensions");
  CommandVector cmd;
  int start = bins.reserved_tokens;
  for (int d = 0; d < bins.action_dims(); ++d) {
    const auto& dim = bins.dims[d];
    int t = tokens.tokens[d];
    if (t < start || t >= start + dim.n_bins) throw InvalidToken(d, t);
    cmd.set_field(dim.field, bin_center(t - start, dim));
    start += dim.n_bins;
  }
  return cmd;
}

std::vector<bool> valid_token_mask(int dim, int vocab_size, const BinSpec& bins) {
  if (dim < 0 || dim >= bins.action_dims())
    throw std::out_of_range("valid_token_mask: dimension index");
  if (vocab_size < bins.vocab_size())
    throw std::invalid_argument("valid_token_mask: vocab smaller than bin layout");
  std::vector<bool> mask(static_cast<size_t>(vocab_size), false);
  int start = bins.block_start(dim);
  for (int t = start; t < start + bins.dims[dim].n_bins; ++t) mask[static_cast<size_t>(t)] = true;
  return mask;
}

std::vector<bool> valid_token_mask(int dim, const BinSpec& bins) {
  return valid_token_mask(dim, bins.vocab_size(), bins);
}

} // namespace more
