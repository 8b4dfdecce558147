#pragma once

#include "normgame/network.hpp"

#include <filesystem>
#include <string>

namespace normgame {

struct LoadOptions {
  bool symmetrize = false;  // treat each listed tie as undirected
};

/// Reads an edge CSV (`group,src,dst,weight`) and a node CSV
/// (`group,node,<x...>[,y][,cluster]`). Columns named `y` and `cluster` are
/// special; every other column is a covariate. A `const` column of ones is
/// prepended unless the file already carries one. Groups and nodes are
/// ordered by first appearance in the node file.
Panel load_panel(const std::filesystem::path& edge_path, const std::filesystem::path& node_path,
                 const LoadOptions& options = {});

/// Writes the panel in the same formats with 17 significant digits. Raw
/// (pre-normalization) weights are emitted when available so that a reload
/// reproduces the normalized weights bit for bit.
void write_panel(const Panel& panel, const std::filesystem::path& edge_path, const std::filesystem::path& node_path);

/// `group,node,group_index,node_index` mapping of opaque labels to dense indices.
void write_node_map(const Panel& panel, const std::filesystem::path& path);

}  // namespace normgame
