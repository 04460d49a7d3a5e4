// SPDX-License-Identifier: Apache-2.0
#include "dualgen/cli.hpp"

int main(int argc, char** argv) { return dualgen::cli_dispatch(argc, argv); }
