# World module
