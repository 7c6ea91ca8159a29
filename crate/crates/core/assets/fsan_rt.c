/* File sanitizer runtime: a table of acquired descriptors, streams and
 * library handles, plus a snapshot of the process descriptor table taken
 * when the harness entry starts. The audit at every entry exit reports
 * resources still held and descriptors opened since the snapshot. */

#include <dirent.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <unistd.h>

#define FSAN_MAX 1024
#define FSAN_MAX_FD 1024

enum { FSAN_FD = 0, FSAN_STREAM = 1, FSAN_HANDLE = 2 };

static const char *fsan_kind_name[] = {"file descriptor", "file stream", "library handle"};

struct fsan_entry {
  unsigned kind;
  unsigned site;
  long key;
  const void *ptr;
  int open;
};

static struct fsan_entry fsan_table[FSAN_MAX];
static size_t fsan_len;
static unsigned char fsan_fd_before[FSAN_MAX_FD];
static int fsan_violations;

static void fsan_report(const char *what, const struct fsan_entry *e) {
  fprintf(stderr, "==FSAN== ERROR: FileSanitizer: %s of %s acquired at site %u\n", what,
          fsan_kind_name[e->kind], e->site);
  fsan_violations++;
}

static struct fsan_entry *fsan_find(unsigned kind, long key, const void *ptr) {
  size_t i = fsan_len;
  while (i > 0) {
    struct fsan_entry *e = &fsan_table[--i];
    if (e->kind == kind && e->key == key && e->ptr == ptr) {
      return e;
    }
  }
  return NULL;
}

static void fsan_add(unsigned kind, long key, const void *ptr, unsigned site) {
  struct fsan_entry *e = fsan_find(kind, key, ptr);
  if (!e || !e->open) {
    if (fsan_len == FSAN_MAX) {
      return;
    }
    e = &fsan_table[fsan_len++];
  }
  e->kind = kind;
  e->key = key;
  e->ptr = ptr;
  e->site = site;
  e->open = 1;
}

static void fsan_remove(unsigned kind, long key, const void *ptr, unsigned site) {
  struct fsan_entry *e = fsan_find(kind, key, ptr);
  if (!e) {
    return;
  }
  if (!e->open) {
    struct fsan_entry tmp = *e;
    tmp.site = site;
    fsan_report("double release", &tmp);
    return;
  }
  e->open = 0;
}

static void fsan_snapshot(unsigned char *seen) {
  DIR *d;
  struct dirent *ent;
  int self;
  memset(seen, 0, FSAN_MAX_FD);
  d = opendir("/proc/self/fd");
  if (!d) {
    return;
  }
  self = dirfd(d);
  while ((ent = readdir(d))) {
    int fd = atoi(ent->d_name);
    if (ent->d_name[0] != '.' && fd != self && fd >= 0 && fd < FSAN_MAX_FD) {
      seen[fd] = 1;
    }
  }
  closedir(d);
}

int __fsan_track_fd(int fd, unsigned site) {
  if (fd >= 0) {
    fsan_add(FSAN_FD, fd, NULL, site);
  }
  return fd;
}

int __fsan_release_fd(int fd, unsigned site) {
  fsan_remove(FSAN_FD, fd, NULL, site);
  return fd;
}

void *__fsan_track_ptr(void *p, unsigned kind, unsigned site) {
  if (p && kind <= FSAN_HANDLE) {
    fsan_add(kind, 0, p, site);
  }
  return p;
}

void *__fsan_release_ptr(void *p, unsigned site) {
  if (p) {
    if (fsan_find(FSAN_STREAM, 0, p)) {
      fsan_remove(FSAN_STREAM, 0, p, site);
    } else {
      fsan_remove(FSAN_HANDLE, 0, p, site);
    }
  }
  return p;
}

void __fsan_enter(void) {
  fsan_len = 0;
  fsan_violations = 0;
  fsan_snapshot(fsan_fd_before);
}

void __fsan_audit(void) {
  unsigned char now[FSAN_MAX_FD];
  size_t i;
  int fd;
  for (i = 0; i < fsan_len; i++) {
    if (fsan_table[i].open) {
      fsan_report("leak", &fsan_table[i]);
      if (fsan_table[i].kind == FSAN_FD && fsan_table[i].key < FSAN_MAX_FD) {
        fsan_fd_before[fsan_table[i].key] = 1;
      }
      if (fsan_table[i].kind == FSAN_STREAM) {
        int sfd = fileno((FILE *)fsan_table[i].ptr);
        if (sfd >= 0 && sfd < FSAN_MAX_FD) {
          fsan_fd_before[sfd] = 1;
        }
      }
    }
  }
  fsan_snapshot(now);
  for (fd = 0; fd < FSAN_MAX_FD; fd++) {
    if (now[fd] && !fsan_fd_before[fd]) {
      fprintf(stderr, "==FSAN== ERROR: FileSanitizer: leak of file descriptor %d opened during the run\n", fd);
      fsan_violations++;
    }
  }
  fsan_len = 0;
  if (fsan_violations) {
    fflush(stderr);
    abort();
  }
}

int __fsan_audit_int(int v) {
  __fsan_audit();
  return v;
}
