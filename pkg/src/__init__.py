"""
Initialize all packages
"""

# This makes the directories Python packages
