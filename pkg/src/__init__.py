# Core modules for the DAN blind super-resolution toolkit
