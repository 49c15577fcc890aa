#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "fomox/matrix.hpp"
#include "fomox/random.hpp"

namespace fomox::dataio {

// A labeled tabular dataset as ingested from disk. Rows containing
// non-finite feature values are dropped at load time and counted.
struct LabeledTable {
    Matrix features;                       // n x d, all finite
    std::vector<int> labels;               // 0 = normal, 1 = outlier
    std::vector<std::string> column_names; // feature columns, header order
    std::filesystem::path source;
    std::size_t dropped_rows = 0;
};

// Parses an RFC-4180-style CSV with a mandatory header row. The column
// named `label_column` is coerced to {0,1}; every other column is a numeric
// feature. Throws LoadError when the file cannot be opened and ParseError
// (with row/column context) for malformed content: missing header or label
// column, ragged rows, non-numeric cells, labels outside {0,1}, or a file
// with no feature columns.
LabeledTable load_csv(const std::filesystem::path& path, const std::string& label_column);

// The inlier-only context / mixed test split. Row indices refer to the
// source table and partition it exactly.
struct ContextSplit {
    Matrix context;                      // inlier rows only
    Matrix queries;                      // every remaining row
    std::vector<int> labels;             // per query row
    std::vector<std::size_t> context_rows;
    std::vector<std::size_t> query_rows;
};

// Draws round(context_fraction * n_inliers) inlier rows (clamped so both
// the context and the test inliers are nonempty) uniformly without
// replacement; everything else, outliers included, becomes the test set.
// Row order within each part follows the source table, and the draw is
// deterministic under the rng state. Throws DomainError for a fraction
// outside (0,1) and SplitError when the table has fewer than two inliers or
// no outlier.
ContextSplit context_split(const LabeledTable& table, double context_fraction,
                           RandomSource& rng);

struct FittedPair {
    Matrix context; // rows x d_max
    Matrix queries;
};

// Standardizes both matrices by the context statistics (the backbone's
// normalize op), then zero-pads the feature axis to d_max. Throws
// CapacityError naming d and d_max when the dataset is too wide and
// ContractError on a context/query width mismatch.
FittedPair fit_to_model(const Matrix& context, const Matrix& queries, std::size_t d_max);

} // namespace fomox::dataio
