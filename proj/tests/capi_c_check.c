/* Compiled as C99: proves the public header needs no C++ compiler. */
#include <ula.h>

const char* capi_c_check_version(void) { return ula_version(); }

int capi_c_check_status_names(void) {
  return (ula_status_name(ULA_OK)[0] == 'o') &&
         (ula_status_name(ULA_ERR_CONFIG)[0] == 'c') &&
         (ula_status_name(ULA_ERR_UNDER_YIELD)[0] == 'u') &&
         (ula_status_name(ULA_ERR_NUMERIC)[0] == 'n') &&
         (ula_status_name(ULA_ERR_IO)[0] == 'i') &&
         (ula_stage_count() > 0u) && (ula_stage_name(0) != 0);
}
