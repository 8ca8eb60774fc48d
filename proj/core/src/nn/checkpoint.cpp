#include "preroute/nn/checkpoint.hpp"

#include <json.hpp>

#include "preroute/error.hpp"
#include "preroute/io.hpp"

namespace preroute::nn {

namespace {

using json = nlohmann::ordered_json;

json hyper_json(const Hyper& h) {
  return json{{"node_dim", h.node_dim},         {"edge_dim", h.edge_dim},         {"hidden", h.hidden},
              {"gcn_layers", h.gcn_layers},     {"mlp_depth", h.mlp_depth},       {"leaky_slope", h.leaky_slope},
              {"ae_hidden", h.ae_hidden},       {"ae_enc_layers", h.ae_enc_layers}, {"ae_dec_layers", h.ae_dec_layers},
              {"latent_dim", h.latent_dim},     {"heads", h.heads},               {"d_k", h.d_k},
              {"d_v", h.d_v},                   {"n_freq", h.n_freq},             {"use_encoder", h.use_encoder}};
}

Hyper hyper_parse(const json& j) {
  Hyper h;
  h.node_dim = j.value("node_dim", h.node_dim);
  h.edge_dim = j.value("edge_dim", h.edge_dim);
  h.hidden = j.value("hidden", h.hidden);
  h.gcn_layers = j.value("gcn_layers", h.gcn_layers);
  h.mlp_depth = j.value("mlp_depth", h.mlp_depth);
  h.leaky_slope = j.value("leaky_slope", h.leaky_slope);
  h.ae_hidden = j.value("ae_hidden", h.ae_hidden);
  h.ae_enc_layers = j.value("ae_enc_layers", h.ae_enc_layers);
  h.ae_dec_layers = j.value("ae_dec_layers", h.ae_dec_layers);
  h.latent_dim = j.value("latent_dim", h.latent_dim);
  h.heads = j.value("heads", h.heads);
  h.d_k = j.value("d_k", h.d_k);
  h.d_v = j.value("d_v", h.d_v);
  h.n_freq = j.value("n_freq", h.n_freq);
  h.use_encoder = j.value("use_encoder", h.use_encoder);
  if (h.hidden < 1 || h.gcn_layers < 0 || h.mlp_depth < 1 || h.heads < 1 || h.d_k < 1 || h.d_v < 1 || h.n_freq < 1 ||
      h.latent_dim < 1 || h.ae_hidden < 1)
    throw InvalidArgument("hyperparameters out of range");
  return h;
}

}  // namespace

std::string hyper_to_json(const Hyper& h) { return hyper_json(h).dump(2) + "\n"; }

Hyper hyper_from_json(std::string_view text) {
  try {
    return hyper_parse(json::parse(text.begin(), text.end()));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed hyperparameters: ") + e.what());
  }
}

template <class T>
std::string serialize_checkpoint(const Checkpoint<T>& ckpt) {
  json params = json::object();
  for (const auto& [path, p] : ckpt.params.items()) {
    json values = json::array();
    for (Eigen::Index i = 0; i < p.value.size(); ++i) values.push_back(static_cast<double>(p.value.data()[i]));
    params[path] = json{{"shape", {p.value.rows(), p.value.cols()}}, {"values", std::move(values)}};
  }
  const json doc{{"format", "preroute-checkpoint"},
                 {"version", kCheckpointVersion},
                 {"kind", ckpt.kind},
                 {"encoder_mode", to_string(ckpt.encoder_mode)},
                 {"hyper", hyper_json(ckpt.hyper)},
                 {"params", std::move(params)}};
  return doc.dump() + "\n";
}

template <class T>
Checkpoint<T> parse_checkpoint(std::string_view text) {
  try {
    const auto doc = json::parse(text.begin(), text.end());
    if (doc.value("format", std::string()) != "preroute-checkpoint") throw FormatError("not a checkpoint document");
    const int version = doc.at("version").get<int>();
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint<T> ck;
    ck.kind = doc.at("kind").get<std::string>();
    ck.encoder_mode = encoder_mode_from_string(doc.at("encoder_mode").get<std::string>());
    ck.hyper = hyper_parse(doc.at("hyper"));
    for (const auto& [path, entry] : doc.at("params").items()) {
      const auto shape = entry.at("shape").template get<std::vector<Eigen::Index>>();
      const auto& values = entry.at("values");
      if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0) throw FormatError("parameter '" + path + "': bad shape");
      if (static_cast<Eigen::Index>(values.size()) != shape[0] * shape[1])
        throw FormatError("parameter '" + path + "': " + std::to_string(values.size()) + " values for shape [" +
                          std::to_string(shape[0]) + ", " + std::to_string(shape[1]) + "]");
      if (ck.params.contains(path)) throw FormatError("duplicate parameter '" + path + "'");
      auto& p = ck.params.add(path, shape[0], shape[1]);
      for (std::size_t i = 0; i < values.size(); ++i) p.value.data()[i] = static_cast<T>(values[i].template get<double>());
    }
    return ck;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  }
}

template <class T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::string& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  try {
    return parse_checkpoint<T>(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

#define PREROUTE_CKPT_INSTANTIATE(T)                                    \
  template std::string serialize_checkpoint(const Checkpoint<T>&);      \
  template Checkpoint<T> parse_checkpoint<T>(std::string_view);         \
  template void save_checkpoint(const Checkpoint<T>&, const std::string&); \
  template Checkpoint<T> load_checkpoint<T>(const std::string&);

PREROUTE_CKPT_INSTANTIATE(float)
PREROUTE_CKPT_INSTANTIATE(double)

#undef PREROUTE_CKPT_INSTANTIATE

}  // namespace preroute::nn
