# dap package
