# Core module
