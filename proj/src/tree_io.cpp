#include "ppd/errors.hpp"
#include "ppd/tree.hpp"

namespace ppd {

nlohmann::json tree_to_json(const SparseTree & tree) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const TreeNode & n : tree.nodes()) {
        nlohmann::json j = {{"id", n.id}};
        j["parent"] = n.parent ? nlohmann::json(*n.parent) : nlohmann::json(nullptr);
        if (n.kind == NodeKind::Candidate) {
            j["kind"] = "candidate";
            j["rank"] = n.rank;
        } else {
            j["kind"] = "prompt";
            j["offset"] = n.offset;
        }
        nodes.push_back(std::move(j));
    }
    return {{"m", tree.m()}, {"nodes", std::move(nodes)}};
}

SparseTree tree_from_json(const nlohmann::json & j) {
    try {
        const auto m = j.at("m").get<std::size_t>();
        std::vector<TreeNode> nodes;
        for (const auto & e : j.at("nodes")) {
            TreeNode n;
            n.id = e.at("id").get<std::size_t>();
            const auto & parent = e.at("parent");
            if (!parent.is_null() && parent.get<long long>() >= 0) {
                n.parent = parent.get<std::size_t>();
            }
            const std::string kind = e.at("kind").get<std::string>();
            if (kind == "candidate") {
                n.kind = NodeKind::Candidate;
                n.rank = e.at("rank").get<std::size_t>();
            } else if (kind == "prompt") {
                n.kind = NodeKind::Prompt;
                n.offset = e.at("offset").get<std::size_t>();
            } else {
                throw FormatError("tree: unknown node kind '" + kind + "'");
            }
            nodes.push_back(n);
        }
        return SparseTree::from_nodes(m, std::move(nodes));
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(std::string("tree JSON: ") + e.what());
    } catch (const ShapeError & e) {
        throw FormatError(std::string("tree JSON: ") + e.what());
    }
}

nlohmann::json profile_to_json(const AcceptanceProfile & profile) {
    return {{"p", profile.p}, {"K", profile.K}, {"m", profile.m}};
}

AcceptanceProfile profile_from_json(const nlohmann::json & j) {
    AcceptanceProfile out;
    try {
        out.p = j.at("p").get<std::vector<std::vector<double>>>();
        out.K = j.at("K").get<std::size_t>();
        out.m = j.at("m").get<std::size_t>();
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(std::string("profile JSON: ") + e.what());
    }
    out.validate();
    return out;
}

} // namespace ppd
