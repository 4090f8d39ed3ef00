#pragma once

#include <numbers>

// SI everywhere inside the library. Gauss and friends only appear where
// config files and the command line are parsed or printed.
namespace conveyor::units {

inline constexpr double pi = std::numbers::pi;
inline constexpr double mu0 = 1.25663706212e-6;  // T m / A
inline constexpr double k_B = 1.380649e-23;      // J / K
inline constexpr double hbar = 1.054571817e-34;  // J s
inline constexpr double amu = 1.66053906660e-27; // kg
inline constexpr double mu_B = 9.2740100783e-24; // J / T
inline constexpr double hartree = 4.3597447222071e-18;  // J
inline constexpr double bohr = 5.29177210903e-11;       // m

inline constexpr double gauss = 1e-4;               // T
inline constexpr double gauss_per_cm = 1e-2;        // T / m
inline constexpr double mbar = 100.0;               // Pa
inline constexpr double c6_atomic = hartree * bohr * bohr * bohr * bohr * bohr * bohr;  // J m^6

constexpr double to_gauss(double tesla) { return tesla / gauss; }
constexpr double to_gauss_per_cm(double tesla_per_m) { return tesla_per_m / gauss_per_cm; }

}  // namespace conveyor::units
