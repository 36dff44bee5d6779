# Graphics module
