"""
Utility modules for the rci-sysid toolkit.
"""
