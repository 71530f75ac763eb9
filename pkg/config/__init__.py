# Configuration for the DAN blind super-resolution toolkit
