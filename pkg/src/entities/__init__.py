# Entities module
