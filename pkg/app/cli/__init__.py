# Command Handlers Package
