#pragma once

#include <string>
#include <string_view>

#include "preroute/nn/model.hpp"

namespace preroute::nn {

inline constexpr int kCheckpointVersion = 1;

/// Parameters plus the record needed to rebuild the model that uses them.
/// `kind` is "encoder" for pre-training output and "model" for a trained
/// predictor.
template <class T>
struct Checkpoint {
  std::string kind;
  Hyper hyper;
  EncoderMode encoder_mode = EncoderMode::Frozen;
  ParamStore<T> params;
};

/// Values are written as decimal doubles that parse back to the same bits,
/// in path order, so equal parameters give byte-identical documents.
template <class T>
std::string serialize_checkpoint(const Checkpoint<T>& ckpt);
/// Throws FormatError on unknown versions, duplicate paths or shape/value
/// count mismatches.
template <class T>
Checkpoint<T> parse_checkpoint(std::string_view text);

template <class T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::string& path);
template <class T>
Checkpoint<T> load_checkpoint(const std::string& path);

std::string hyper_to_json(const Hyper& h);
Hyper hyper_from_json(std::string_view text);

}  // namespace preroute::nn
