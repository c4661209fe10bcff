#ifndef VBKS_IO_HPP
#define VBKS_IO_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include "vbks/gp_core.hpp"
#include "vbks/kernel_belief.hpp"
#include "vbks/local_elbo.hpp"

namespace vbks {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kCheckpointFormat = "vbks-checkpoint/1";

/// Comma-separated rows; the last column is the output. A first row with any
/// non-numeric cell is taken as a header.
Dataset parse_csv(std::string_view text, bool normalize = false);
Dataset ingest_csv(const std::filesystem::path& path, bool normalize = false);
void write_csv(const Dataset& data, const std::filesystem::path& path);

/// Standardizes every input column and the output; stores the transform.
Dataset normalize_dataset(const Dataset& data);
/// Applies an existing transform (e.g. the training set's) to other data.
Dataset apply_normalization(const Dataset& data, const Normalization& norm);
/// Maps a predictive mean/variance on the normalized scale back to raw units.
BatchMoments denormalize(const BatchMoments& m, const Normalization& norm);

/// Random disjoint (train, test) split with |test| = n_test.
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, Eigen::Index n_test,
                                          std::uint64_t seed);

std::string state_to_json(const SgprState& state);
SgprState state_from_json(std::string_view text);
std::string belief_to_json(const KernelBeliefState& belief);
KernelBeliefState belief_from_json(std::string_view text);

std::string read_text(const std::filesystem::path& path);
/// Writes via a temporary file and rename so readers never see a partial file.
void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace vbks

#endif  // VBKS_IO_HPP
