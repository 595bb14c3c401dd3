#include "nhp_oam/app.hpp"

int main(int argc, char** argv) { return nhp::app::run(argc, argv); }
