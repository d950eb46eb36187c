// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#include "cdsm/cli.hpp"

int main(int argc, char** argv) { return cdsm::cli::cli_main(argc, argv); }
