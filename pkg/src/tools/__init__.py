# dap.tools package
