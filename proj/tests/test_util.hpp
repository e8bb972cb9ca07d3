#pragma once

#include <functional>

#include <gtest/gtest.h>

#include <voxcell/error.hpp>

inline voxcell::ErrorKind error_kind(const std::function<void()>& f) {
    try {
        f();
    } catch (const voxcell::Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return voxcell::ErrorKind::Io;
}
