#include "more/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <vector>

#include "more/trajectory_store.hpp" // IoError

namespace more {
namespace {

uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 1469598103934665603ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

} // namespace

uint64_t config_fingerprint(const ModelConfig& cfg) {
  std::ostringstream os;
  os << cfg.vocab << ' ' << cfg.action_dims << ' ' << cfg.max_seq << ' ' << cfg.n_layers << ' '
     << cfg.hidden << ' ' << cfg.n_heads << ' ' << cfg.ffn_mult << ' ' << cfg.n_experts << ' '
     << cfg.top_k << ' ' << cfg.lora_rank << ' ' << cfg.lora_scaling << ' '
     << cfg.attention_lora << ' ' << cfg.tied_head << ' ' << cfg.init_seed;
  std::string s = os.str();
  return fnv1a_bytes(s.data(), s.size());
}

void save_checkpoint(const std::string& path, const Trainables& tr, uint64_t fingerprint,
                     const std::string& rng_state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out << "MORE-CKPT v1\n";
  out << "fingerprint " << std::hex << fingerprint << std::dec << "\n";
  out << "rng " << (rng_state.empty() ? "-" : rng_state) << "\n";
  std::vector<const Matrix*> order;
  for_each_param(tr, [&](const std::string& name, const Matrix& m) {
    out << "tensor " << name << " float32 " << m.rows() << " " << m.cols() << "\n";
    order.push_back(&m);
  });
  out << "end\n";
  for (const Matrix* m : order) {
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      float v = static_cast<float>(m->data()[i]);
      out.write(reinterpret_cast<const char*>(&v), sizeof(float));
    }
  }
  if (!out) throw IoError("checkpoint write failed: " + path);
}

CheckpointHeader load_checkpoint(const std::string& path, Trainables& tr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint for reading: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "MORE-CKPT v1")
    throw IoError("not a checkpoint file: " + path);
  CheckpointHeader hdr;
  struct Entry {
    std::string name;
    Eigen::Index rows, cols;
  };
  std::vector<Entry> entries;
  while (std::getline(in, line)) {
    if (line == "end") break;
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    if (kind == "fingerprint") {
      is >> std::hex >> hdr.fingerprint;
    } else if (kind == "rng") {
      std::string rest;
      std::getline(is, rest);
      if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
      hdr.rng_state = rest == "-" ? "" : rest;
    } else if (kind == "tensor") {
      Entry e;
      std::string dtype;
      is >> e.name >> dtype >> e.rows >> e.cols;
      if (dtype != "float32") throw IoError("unsupported dtype: " + dtype);
      entries.push_back(std::move(e));
    } else {
      throw IoError("unknown checkpoint header line: " + line);
    }
  }
  size_t idx = 0;
  for_each_param(tr, [&](const std::string& name, Matrix& m) {
    if (idx >= entries.size()) throw IoError("checkpoint has too few tensors");
    const Entry& e = entries[idx++];
    if (e.name != name || e.rows != m.rows() || e.cols != m.cols())
      throw IoError("checkpoint tensor mismatch at " + name);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      float v;
      in.read(reinterpret_cast<char*>(&v), sizeof(float));
      m.data()[i] = static_cast<double>(v);
    }
  });
  if (idx != entries.size()) throw IoError("checkpoint has extra tensors");
  if (!in) throw IoError("checkpoint payload truncated: " + path);
  return hdr;
}

} // namespace more
