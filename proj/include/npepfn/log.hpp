#pragma once

#include <functional>
#include <string>

namespace npepfn {

using WarningHandler = std::function<void(const std::string&)>;

/// Emits a warning through the installed handler (stderr by default).
void warn(const std::string& message);

/// Installs a new handler and returns the previous one.
WarningHandler set_warning_handler(WarningHandler handler);

}  // namespace npepfn
