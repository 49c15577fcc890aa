#include "fomox/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "fomox/backbone.hpp"
#include "fomox/csv.hpp"
#include "fomox/errors.hpp"

namespace fomox::dataio {

namespace {

// getline plus CRLF tolerance: a trailing carriage return is stripped.
bool read_line(std::istream& in, std::string& line) {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
}

} // namespace

LabeledTable load_csv(const std::filesystem::path& path, const std::string& label_column) {
    std::ifstream in(path);
    if (!in) throw LoadError("load_csv: cannot open " + path.string());

    std::string line;
    if (!read_line(in, line) || line.empty())
        throw ParseError("load_csv: " + path.string() + " is empty (header row required)");

    std::vector<std::string> header = csv::split(line);
    std::size_t label_idx = header.size();
    for (std::size_t j = 0; j < header.size(); ++j)
        if (header[j] == label_column) {
            label_idx = j;
            break;
        }
    if (label_idx == header.size())
        throw ParseError("load_csv: " + path.string() + " has no column named '" +
                         label_column + "'");
    if (header.size() < 2)
        throw ParseError("load_csv: " + path.string() + " has no feature columns");

    LabeledTable table;
    table.source = path;
    for (std::size_t j = 0; j < header.size(); ++j)
        if (j != label_idx) table.column_names.push_back(header[j]);
    std::size_t d = table.column_names.size();

    std::vector<double> values; // kept rows, row-major
    std::size_t row = 1;        // header is row 1
    std::vector<double> parsed(d);
    while (read_line(in, line)) {
        ++row;
        if (line.empty() && in.peek() == std::char_traits<char>::eof()) break;
        std::vector<std::string> cells = csv::split(line);
        if (cells.size() != header.size())
            throw ParseError("load_csv: " + path.string() + " row " + std::to_string(row) +
                             " has " + std::to_string(cells.size()) + " cells, expected " +
                             std::to_string(header.size()));
        std::string where_base = path.string() + " row " + std::to_string(row);

        double label_value =
            csv::parse_double(cells[label_idx], where_base + ", column '" + label_column + "'");
        if (label_value != 0.0 && label_value != 1.0)
            throw ParseError("load_csv: " + where_base + ": label must be 0 or 1, got '" +
                             cells[label_idx] + "'");

        bool finite = true;
        std::size_t k = 0;
        for (std::size_t j = 0; j < header.size(); ++j) {
            if (j == label_idx) continue;
            double v = csv::parse_double(cells[j], where_base + ", column '" + header[j] + "'");
            if (!std::isfinite(v)) finite = false;
            parsed[k++] = v;
        }
        if (!finite) {
            ++table.dropped_rows; // policy: drop, never impute
            continue;
        }
        values.insert(values.end(), parsed.begin(), parsed.end());
        table.labels.push_back(static_cast<int>(label_value));
    }

    table.features = Matrix(table.labels.size(), d);
    table.features.data = std::move(values);
    return table;
}

ContextSplit context_split(const LabeledTable& table, double context_fraction,
                           RandomSource& rng) {
    if (!(context_fraction > 0.0 && context_fraction < 1.0))
        throw DomainError("context_split: context_fraction must lie in (0,1)");

    std::vector<std::size_t> inlier_rows;
    std::size_t n_outliers = 0;
    for (std::size_t i = 0; i < table.labels.size(); ++i) {
        if (table.labels[i] == 0)
            inlier_rows.push_back(i);
        else
            ++n_outliers;
    }
    std::size_t n0 = inlier_rows.size();
    if (n0 < 2)
        throw SplitError("context_split: need at least 2 inliers, found " + std::to_string(n0));
    if (n_outliers == 0) throw SplitError("context_split: the test set needs outliers");

    auto n_ctx = static_cast<std::size_t>(std::lround(context_fraction * static_cast<double>(n0)));
    n_ctx = std::clamp<std::size_t>(n_ctx, 1, n0 - 1);

    // subset() returns ascending positions, so both parts keep source order.
    std::vector<std::size_t> picked = rng.subset(n_ctx, n0);
    std::vector<bool> in_context(table.labels.size(), false);
    ContextSplit split;
    for (std::size_t p : picked) {
        split.context_rows.push_back(inlier_rows[p]);
        in_context[inlier_rows[p]] = true;
    }
    for (std::size_t i = 0; i < table.labels.size(); ++i)
        if (!in_context[i]) split.query_rows.push_back(i);

    std::size_t d = table.features.cols;
    split.context = Matrix(split.context_rows.size(), d);
    for (std::size_t i = 0; i < split.context_rows.size(); ++i)
        std::copy_n(table.features.row(split.context_rows[i]), d, split.context.row(i));
    split.queries = Matrix(split.query_rows.size(), d);
    split.labels.resize(split.query_rows.size());
    for (std::size_t i = 0; i < split.query_rows.size(); ++i) {
        std::copy_n(table.features.row(split.query_rows[i]), d, split.queries.row(i));
        split.labels[i] = table.labels[split.query_rows[i]];
    }
    return split;
}

FittedPair fit_to_model(const Matrix& context, const Matrix& queries, std::size_t d_max) {
    if (context.cols != queries.cols)
        throw ContractError("fit_to_model: context has " + std::to_string(context.cols) +
                            " features, queries have " + std::to_string(queries.cols));
    std::size_t d = context.cols;
    if (d > d_max)
        throw CapacityError("fit_to_model: dataset has " + std::to_string(d) +
                            " features but the model pads to d_max = " + std::to_string(d_max));

    bb::Normalized norm = bb::normalize(context, queries);
    FittedPair fitted;
    fitted.context = Matrix(norm.context.rows, d_max);
    for (std::size_t i = 0; i < norm.context.rows; ++i)
        std::copy_n(norm.context.row(i), d, fitted.context.row(i));
    fitted.queries = Matrix(norm.queries.rows, d_max);
    for (std::size_t i = 0; i < norm.queries.rows; ++i)
        std::copy_n(norm.queries.row(i), d, fitted.queries.row(i));
    return fitted;
}

} // namespace fomox::dataio
