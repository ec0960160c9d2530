/* Launcher that reports a child's peak resident set. Being a small process, it keeps the
 * inherited high-water mark (which survives fork and exec) far below the child's own. */
#include <stdio.h>
#include <stdlib.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

int main(int argc, char **argv)
{
    if (argc < 2) {
        fprintf(stderr, "usage: fx_rss CMD ARGS...\n");
        return 2;
    }
    pid_t pid = fork();
    if (pid < 0)
        return 2;
    if (pid == 0) {
        /* the preload applies to the child only, so the launcher stays small */
        const char *pre = getenv("FX_RSS_PRELOAD");
        if (pre)
            setenv("LD_PRELOAD", pre, 1);
        unsetenv("FX_RSS_PRELOAD");
        execvp(argv[1], argv + 1);
        _exit(127);
    }
    int st;
    struct rusage ru;
    if (wait4(pid, &st, 0, &ru) < 0)
        return 2;
    fprintf(stderr, "fx_rss maxrss_kb %ld status %d\n", ru.ru_maxrss, st);
    return WIFEXITED(st) ? WEXITSTATUS(st) : 128 + WTERMSIG(st);
}
