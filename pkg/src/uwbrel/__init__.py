"""Relative pose and clock estimation for robot teams with UWB ranging and
preintegrated IMU data, plus a simulator and evaluation tools."""

__version__ = "0.1.0"
