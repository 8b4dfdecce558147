#include "normgame/panel_io.hpp"

#include "normgame/csv.hpp"
#include "normgame/errors.hpp"

#include <fstream>
#include <map>
#include <unordered_map>

namespace normgame {

namespace {

struct NodeRow {
  std::string group;
  std::string node;
  std::vector<double> x;
  double y = 0.0;
  std::string cluster;
};

std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

bool is_blank(const std::string& line) {
  return line.find_first_not_of(" \t\r\n") == std::string::npos;
}

}  // namespace

Panel load_panel(const std::filesystem::path& edge_path, const std::filesystem::path& node_path,
                 const LoadOptions& options) {
  const std::string node_file = node_path.string();
  auto nodes_in = open_for_read(node_path);
  std::string line;
  std::size_t lineno = 0;

  // Header.
  std::vector<std::string> header;
  while (std::getline(nodes_in, line)) {
    ++lineno;
    if (is_blank(line)) continue;
    header = csv::split(line);
    break;
  }
  if (header.size() < 2 || header[0] != "group" || header[1] != "node") {
    throw ParseError(node_file, lineno == 0 ? 1 : lineno, "node header must start with group,node");
  }
  int y_col = -1;
  int cluster_col = -1;
  std::vector<int> x_cols;
  std::vector<std::string> x_names;
  for (std::size_t k = 2; k < header.size(); ++k) {
    if (header[k] == "y") {
      y_col = static_cast<int>(k);
    } else if (header[k] == "cluster") {
      cluster_col = static_cast<int>(k);
    } else {
      x_cols.push_back(static_cast<int>(k));
      x_names.push_back(header[k]);
    }
  }

  std::vector<std::string> group_order;
  std::unordered_map<std::string, std::size_t> group_index;
  std::vector<std::vector<NodeRow>> rows_by_group;
  std::vector<std::unordered_map<std::string, std::size_t>> node_index;

  while (std::getline(nodes_in, line)) {
    ++lineno;
    if (is_blank(line)) continue;
    auto fields = csv::split(line);
    if (fields.size() != header.size()) {
      throw ParseError(node_file, lineno,
                       "expected " + std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
    }
    NodeRow row;
    row.group = fields[0];
    row.node = fields[1];
    if (row.group.empty() || row.node.empty()) throw ParseError(node_file, lineno, "empty group or node label");
    for (int c : x_cols) {
      auto v = csv::parse_double(fields[static_cast<std::size_t>(c)]);
      if (!v) throw ParseError(node_file, lineno, "bad number '" + fields[static_cast<std::size_t>(c)] + "'");
      row.x.push_back(*v);
    }
    if (y_col >= 0) {
      auto v = csv::parse_double(fields[static_cast<std::size_t>(y_col)]);
      if (!v) throw ParseError(node_file, lineno, "bad outcome '" + fields[static_cast<std::size_t>(y_col)] + "'");
      row.y = *v;
    }
    if (cluster_col >= 0) row.cluster = fields[static_cast<std::size_t>(cluster_col)];

    auto [git, inserted] = group_index.try_emplace(row.group, group_order.size());
    if (inserted) {
      group_order.push_back(row.group);
      rows_by_group.emplace_back();
      node_index.emplace_back();
    }
    const std::size_t g = git->second;
    auto [nit, fresh] = node_index[g].try_emplace(row.node, rows_by_group[g].size());
    if (!fresh) throw ParseError(node_file, lineno, "duplicate node '" + row.node + "' in group '" + row.group + "'");
    rows_by_group[g].push_back(std::move(row));
  }

  // Edges.
  std::vector<Eigen::MatrixXd> raw(group_order.size());
  for (std::size_t g = 0; g < group_order.size(); ++g) {
    const auto n = static_cast<Index>(rows_by_group[g].size());
    raw[g] = Eigen::MatrixXd::Zero(n, n);
  }
  {
    const std::string edge_file = edge_path.string();
    auto edges_in = open_for_read(edge_path);
    std::size_t eline = 0;
    bool have_header = false;
    while (std::getline(edges_in, line)) {
      ++eline;
      if (is_blank(line)) continue;
      auto fields = csv::split(line);
      if (!have_header) {
        if (fields != std::vector<std::string>{"group", "src", "dst", "weight"}) {
          throw ParseError(edge_file, eline, "edge header must be group,src,dst,weight");
        }
        have_header = true;
        continue;
      }
      if (fields.size() != 4) throw ParseError(edge_file, eline, "expected 4 fields, got " + std::to_string(fields.size()));
      auto w = csv::parse_double(fields[3]);
      if (!w || !std::isfinite(*w)) throw ParseError(edge_file, eline, "bad weight '" + fields[3] + "'");
      if (*w < 0.0) {
        throw DomainError(edge_file + ":" + std::to_string(eline) + ": negative weight " + fields[3]);
      }
      auto git = group_index.find(fields[0]);
      if (git == group_index.end()) {
        throw ParseError(edge_file, eline, "group '" + fields[0] + "' has no covariate rows");
      }
      const std::size_t g = git->second;
      auto src = node_index[g].find(fields[1]);
      auto dst = node_index[g].find(fields[2]);
      if (src == node_index[g].end() || dst == node_index[g].end()) {
        const std::string& missing = src == node_index[g].end() ? fields[1] : fields[2];
        throw ParseError(edge_file, eline, "node '" + missing + "' in group '" + fields[0] + "' has no covariate row");
      }
      if (src->second == dst->second) {
        throw DomainError(edge_file + ":" + std::to_string(eline) + ": self-loop on node " + fields[1]);
      }
      raw[g](static_cast<Index>(src->second), static_cast<Index>(dst->second)) += *w;
    }
  }

  // Assemble.
  std::size_t total = 0;
  for (const auto& rows : rows_by_group) total += rows.size();
  const bool add_const = std::find(x_names.begin(), x_names.end(), "const") == x_names.end();
  const Index p = static_cast<Index>(x_cols.size()) + (add_const ? 1 : 0);
  Eigen::MatrixXd X(static_cast<Index>(total), p);
  std::optional<Eigen::VectorXd> y;
  if (y_col >= 0) y = Eigen::VectorXd(static_cast<Index>(total));
  std::vector<int> clusters;
  std::map<std::string, int> cluster_ids;
  std::vector<Network> groups;
  std::vector<std::string> node_labels;
  Index r = 0;
  for (std::size_t g = 0; g < group_order.size(); ++g) {
    const Eigen::MatrixXd w = options.symmetrize ? symmetrize(raw[g]) : raw[g];
    groups.push_back(row_normalize(w, static_cast<int>(g)));
    for (const auto& row : rows_by_group[g]) {
      Index c = 0;
      if (add_const) X(r, c++) = 1.0;
      for (double v : row.x) X(r, c++) = v;
      if (y) (*y)(r) = row.y;
      if (cluster_col >= 0) {
        auto [it, _] = cluster_ids.try_emplace(row.cluster, static_cast<int>(cluster_ids.size()));
        clusters.push_back(it->second);
      }
      node_labels.push_back(row.node);
      ++r;
    }
  }
  if (add_const) x_names.insert(x_names.begin(), "const");
  Panel panel = Panel::assemble(std::move(groups), std::move(X), std::move(x_names), std::move(y), std::move(clusters));
  panel.group_labels = group_order;
  panel.node_labels = std::move(node_labels);
  return panel;
}

void write_panel(const Panel& panel, const std::filesystem::path& edge_path, const std::filesystem::path& node_path) {
  std::ofstream edges(edge_path);
  if (!edges) throw std::runtime_error("cannot write " + edge_path.string());
  edges << "group,src,dst,weight\n";
  for (std::size_t g = 0; g < panel.num_groups(); ++g) {
    const Network& net = panel.groups[g];
    const Eigen::MatrixXd& w = net.raw_weights.size() == net.weights.size() ? net.raw_weights : net.weights;
    for (Index i = 0; i < net.size(); ++i) {
      for (Index j = 0; j < net.size(); ++j) {
        if (w(i, j) == 0.0) continue;
        edges << panel.group_labels[g] << ',' << panel.node_labels[static_cast<std::size_t>(panel.offsets[g] + i)] << ','
              << panel.node_labels[static_cast<std::size_t>(panel.offsets[g] + j)] << ',' << csv::format_double(w(i, j))
              << '\n';
      }
    }
  }

  std::ofstream nodes(node_path);
  if (!nodes) throw std::runtime_error("cannot write " + node_path.string());
  std::vector<std::string> header{"group", "node"};
  header.insert(header.end(), panel.x_names.begin(), panel.x_names.end());
  if (panel.y) header.emplace_back("y");
  header.emplace_back("cluster");
  nodes << csv::join(header) << '\n';
  for (std::size_t g = 0; g < panel.num_groups(); ++g) {
    for (Index i = panel.offsets[g]; i < panel.offsets[g + 1]; ++i) {
      std::vector<std::string> fields{panel.group_labels[g], panel.node_labels[static_cast<std::size_t>(i)]};
      for (Index k = 0; k < panel.X.cols(); ++k) fields.push_back(csv::format_double(panel.X(i, k)));
      if (panel.y) fields.push_back(csv::format_double((*panel.y)(i)));
      fields.push_back(std::to_string(panel.cluster_id[static_cast<std::size_t>(i)]));
      nodes << csv::join(fields) << '\n';
    }
  }
}

void write_node_map(const Panel& panel, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "group,node,group_index,node_index\n";
  for (std::size_t g = 0; g < panel.num_groups(); ++g) {
    for (Index i = panel.offsets[g]; i < panel.offsets[g + 1]; ++i) {
      out << panel.group_labels[g] << ',' << panel.node_labels[static_cast<std::size_t>(i)] << ',' << g << ',' << i
          << '\n';
    }
  }
}

}  // namespace normgame
