// SPDX-License-Identifier: Apache-2.0

#include "kvsvd/error.hpp"

namespace kvsvd {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::contract: return "contract";
    case ErrorKind::numerical: return "numerical";
    case ErrorKind::undefined_input: return "undefined_input";
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::checksum: return "checksum";
    case ErrorKind::missing_tensor: return "missing_tensor";
    case ErrorKind::validation: return "validation";
    case ErrorKind::infeasible: return "infeasible";
    case ErrorKind::inapplicable: return "inapplicable";
    }
    return "unknown";
}

} // namespace kvsvd
