"""Desk-scale lab for FE discretizations of backward stochastic parabolic
equations and stochastic linear-quadratic control."""

__version__ = "0.1.0"
