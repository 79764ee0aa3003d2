#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace more {

// Continuous robot command: planar velocities, gait phases, stepping
// frequency, body posture and a binary termination flag.
struct CommandVector {
  double v_x = 0.0;     // m/s
  double v_y = 0.0;     // m/s
  double omega_z = 0.0; // rad/s
  double theta_1 = 0.0; // gait phase
  double theta_2 = 0.0;
  double theta_3 = 0.0;
  double f = 0.0;   // Hz
  double h_z = 0.0; // body height, m
  double phi = 0.0; // pitch, rad
  double s_y = 0.0; // foot width, m
  double h_z_f = 0.0; // foot height, m
  double T = 0.0;     // termination flag, 0 or 1

  static constexpr int kNumFields = 12;

  double field(int i) const;
  void set_field(int i, double v);
  static const char* field_name(int i);
};

// Per-dimension uniform binning of the command space. Each dimension owns a
// contiguous token block placed after a reserved non-action region of the
// vocabulary, so most tokens are not valid actions.
struct BinSpec {
  struct Dim {
    double lo;
    double hi;
    int n_bins;
    int field; // CommandVector field this dimension encodes
  };
  std::vector<Dim> dims;
  int reserved_tokens = 0; // non-action region [0, reserved_tokens)

  int action_dims() const { return static_cast<int>(dims.size()); }
  int action_vocab() const;
  // Total vocabulary size: reserved region plus all action blocks.
  int vocab_size() const { return reserved_tokens + action_vocab(); }
  // First token of dimension d's block.
  int block_start(int d) const;

  void validate() const;

  // 12-dim layout with 21 bins per continuous field and 2 for T.
  static BinSpec default_spec(int reserved_tokens);
  // Reduced layout for tiny configurations: n_dims fields, n_bins each,
  // range [lo, hi]; the last dimension is always the binary T flag.
  static BinSpec toy_spec(int reserved_tokens, int n_dims, int n_bins,
                          double lo = -1.0, double hi = 1.0);
};

struct ActionTokens {
  std::vector<int> tokens; // one per action dimension, absolute vocab ids
};

struct OutOfRange : std::runtime_error {
  int dim;
  explicit OutOfRange(int d, double value)
      : std::runtime_error("command field " + std::string(CommandVector::field_name(d)) +
                           " out of bin range (value " + std::to_string(value) + ")"),
        dim(d) {}
};

struct InvalidToken : std::runtime_error {
  int dim;
  int token;
  InvalidToken(int d, int t)
      : std::runtime_error("token " + std::to_string(t) +
                           " is not a valid action token for dimension " + std::to_string(d)),
        dim(d), token(t) {}
};

// Bin index for a value within one dimension; hi clamps into the last bin.
int bin_index(double value, const BinSpec::Dim& dim);
// Center of bin b.
double bin_center(int b, const BinSpec::Dim& dim);

ActionTokens discretize(const CommandVector& cmd, const BinSpec& bins);
CommandVector detokenize(const ActionTokens& tokens, const BinSpec& bins);

// Mask over the full vocabulary: true exactly on dimension `dim`'s block.
// vocab_size may exceed bins.vocab_size(); the excess is all false.
std::vector<bool> valid_token_mask(int dim, int vocab_size, const BinSpec& bins);
std::vector<bool> valid_token_mask(int dim, const BinSpec& bins);

} // namespace more
