#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace v2x {

// Every failure raised by the library carries one of these codes so callers
// (tests, the CLI exit-code mapping) can branch without parsing messages.
enum class Errc {
  zero_norm,
  non_positive_temperature,
  empty_sequence,
  non_finite_evaluation,
  shape_mismatch,
  height_mismatch,
  channel_mismatch,
  indivisible_patch_grid,
  empty_prompt,
  unknown_token_id,
  out_of_range_coordinate,
  malformed_token_sequence,
  batch_too_small,
  target_out_of_vocab,
  length_mismatch,
  non_finite_term,
  divergence_detected,
  step_out_of_range,
  rank_missing,
  invalid_config,
  degenerate_dimensions,
  bad_magic,
  crc_mismatch,
  truncated_frame,
  unsupported_version,
  peer_timeout,
  decode_failure,
  too_short,
  empty_dataset,
  io_error,
  usage_error,
};

constexpr std::string_view errc_name(Errc e) {
  switch (e) {
    case Errc::zero_norm: return "ZeroNorm";
    case Errc::non_positive_temperature: return "NonPositiveTemperature";
    case Errc::empty_sequence: return "EmptySequence";
    case Errc::non_finite_evaluation: return "NonFiniteEvaluation";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::height_mismatch: return "HeightMismatch";
    case Errc::channel_mismatch: return "ChannelMismatch";
    case Errc::indivisible_patch_grid: return "IndivisiblePatchGrid";
    case Errc::empty_prompt: return "EmptyPrompt";
    case Errc::unknown_token_id: return "UnknownTokenId";
    case Errc::out_of_range_coordinate: return "OutOfRangeCoordinate";
    case Errc::malformed_token_sequence: return "MalformedTokenSequence";
    case Errc::batch_too_small: return "BatchTooSmall";
    case Errc::target_out_of_vocab: return "TargetOutOfVocab";
    case Errc::length_mismatch: return "LengthMismatch";
    case Errc::non_finite_term: return "NonFiniteTerm";
    case Errc::divergence_detected: return "DivergenceDetected";
    case Errc::step_out_of_range: return "StepOutOfRange";
    case Errc::rank_missing: return "RankMissing";
    case Errc::invalid_config: return "InvalidConfig";
    case Errc::degenerate_dimensions: return "DegenerateDimensions";
    case Errc::bad_magic: return "BadMagic";
    case Errc::crc_mismatch: return "CrcMismatch";
    case Errc::truncated_frame: return "TruncatedFrame";
    case Errc::unsupported_version: return "UnsupportedVersion";
    case Errc::peer_timeout: return "PeerTimeout";
    case Errc::decode_failure: return "DecodeFailure";
    case Errc::too_short: return "TooShort";
    case Errc::empty_dataset: return "EmptyDataset";
    case Errc::io_error: return "IoError";
    case Errc::usage_error: return "UsageError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace v2x
