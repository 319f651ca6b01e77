// SPDX-License-Identifier: Apache-2.0
#include "modfuse/cli.hpp"

int main(int argc, char** argv) { return modfuse::run_cli(argc, argv); }
