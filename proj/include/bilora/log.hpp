// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <utility>

namespace bilora {

using LogSink = std::function<void(const std::string&)>;

inline LogSink& warning_sink() {
    static LogSink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
    return sink;
}

/// Replace the warning sink; returns the previous one.
inline LogSink set_warning_sink(LogSink sink) { return std::exchange(warning_sink(), std::move(sink)); }

inline void log_warning(const std::string& msg) {
    if (warning_sink()) warning_sink()(msg);
}

} // namespace bilora
