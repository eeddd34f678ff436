// SPDX-License-Identifier: Apache-2.0
#include "protoprompt/cli.hpp"

int main(int argc, char** argv) { return protoprompt::run_cli(argc, argv); }
